//! Fixed-column reader and writer for the ATOM-record subset of PDB v3.3.
//!
//! Column layout (1-based, inclusive):
//!
//! ```text
//!  1-6   record name      "ATOM  "
//!  7-11  serial
//! 13-16  atom name
//! 17     altLoc           blank or 'A' kept, anything else dropped
//! 18-20  residue name
//! 22     chain id
//! 23-26  residue seq
//! 31-38  x   39-46 y   47-54 z
//! 55-60  occupancy   61-66 temp factor
//! 77-78  element symbol
//! ```
//!
//! TER and END are accepted; every other record type is skipped.

use std::fmt::Write as _;

use super::{Atom, Element, Residue, Topology, Vec3};
use crate::{Error, Result};

/// Topology plus the coordinates carried by the ATOM records.
#[derive(Debug, Clone, PartialEq)]
pub struct PdbStructure {
    pub topology: Topology,
    pub coordinates: Vec<Vec3>,
}

pub fn parse_topology(text: &str) -> Result<Topology> {
    parse_pdb(text).map(|s| s.topology)
}

pub fn parse_pdb(text: &str) -> Result<PdbStructure> {
    let mut atoms: Vec<Atom> = Vec::new();
    let mut residues: Vec<Residue> = Vec::new();
    let mut coordinates = Vec::new();
    let mut current: Option<(char, i32)> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        let record = line.get(..6).unwrap_or(line).trim_end();
        match record {
            "END" | "ENDMDL" => break,
            "TER" => {
                current = None;
                continue;
            }
            "ATOM" => {}
            _ => continue,
        }
        if !line.is_ascii() {
            return Err(parse_err(line_no, "non-ASCII characters in ATOM record"));
        }
        if line.len() < 54 {
            return Err(parse_err(
                line_no,
                &format!("ATOM record has {} columns, coordinates need 54", line.len()),
            ));
        }

        let alt_loc = col(line, 17, 17);
        if !(alt_loc.is_empty() || alt_loc == "A") {
            continue;
        }
        let name = col(line, 13, 16).to_string();
        if name.is_empty() {
            return Err(parse_err(line_no, "blank atom name (columns 13-16)"));
        }
        let residue_name = col(line, 18, 20).to_string();
        if residue_name.is_empty() {
            return Err(parse_err(line_no, "blank residue name (columns 18-20)"));
        }
        let chain = line.as_bytes()[21] as char;
        let seq: i32 = col(line, 23, 26)
            .parse()
            .map_err(|_| parse_err(line_no, "residue sequence number (columns 23-26) is not an integer"))?;
        let mut xyz = [0.0f64; 3];
        for (k, (a, b)) in [(31, 38), (39, 46), (47, 54)].into_iter().enumerate() {
            let field = col(line, a, b);
            xyz[k] = field.parse().map_err(|_| {
                parse_err(line_no, &format!("coordinate '{field}' (columns {a}-{b}) is not a number"))
            })?;
            if !xyz[k].is_finite() {
                return Err(parse_err(line_no, "non-finite coordinate"));
            }
        }

        let element_field = if line.len() >= 77 { col(line, 77, 78.min(line.len())) } else { "" };
        let element = if element_field.is_empty() {
            let first = name
                .chars()
                .find(|c| c.is_ascii_alphabetic())
                .ok_or_else(|| parse_err(line_no, "cannot infer element from atom name"))?;
            Element::from_symbol(&first.to_string())?
        } else {
            Element::from_symbol(element_field)?
        };

        if current != Some((chain, seq)) {
            if let Some(last) = residues.last_mut() {
                last.atoms.end = atoms.len();
            }
            residues.push(Residue {
                name: residue_name.clone(),
                chain,
                seq,
                atoms: atoms.len()..atoms.len(),
            });
            current = Some((chain, seq));
        }
        atoms.push(Atom {
            name,
            element,
            residue_index: residues.len() - 1,
            residue_name,
            mass: element.mass(),
            vdw_radius: element.vdw_radius(),
        });
        coordinates.push(xyz);
    }

    if atoms.is_empty() {
        return Err(Error::Parse { line: 0, msg: "no ATOM records".into() });
    }
    if let Some(last) = residues.last_mut() {
        last.atoms.end = atoms.len();
    }
    Ok(PdbStructure { topology: Topology::new(atoms, residues)?, coordinates })
}

/// Writes ATOM records for `topology` at `coordinates`, followed by TER/END.
pub fn write_pdb(topology: &Topology, coordinates: &[Vec3]) -> Result<String> {
    if coordinates.len() != topology.n_atoms() {
        return Err(Error::Consistency(format!(
            "{} coordinates for {} atoms",
            coordinates.len(),
            topology.n_atoms()
        )));
    }
    let mut out = String::new();
    for (i, (atom, p)) in topology.atoms().iter().zip(coordinates).enumerate() {
        let res = &topology.residues()[atom.residue_index];
        // Four-character names start in column 13, shorter ones in column 14.
        let name = if atom.name.len() >= 4 {
            atom.name.clone()
        } else {
            format!(" {}", atom.name)
        };
        writeln!(
            out,
            "ATOM  {:>5} {:<4} {:>3} {}{:>4}    {:>8.3}{:>8.3}{:>8.3}{:>6.2}{:>6.2}          {:>2}",
            (i + 1) % 100_000,
            name,
            atom.residue_name,
            res.chain,
            res.seq,
            p[0],
            p[1],
            p[2],
            1.0,
            0.0,
            atom.element.symbol()
        )
        .expect("writing to a String cannot fail");
    }
    out.push_str("TER\nEND\n");
    Ok(out)
}

fn col(line: &str, first: usize, last: usize) -> &str {
    let end = last.min(line.len());
    if first > end {
        return "";
    }
    line[first - 1..end].trim()
}

fn parse_err(line: usize, msg: &str) -> Error {
    Error::Parse { line, msg: msg.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ASP_N: &str =
        "ATOM      1  N   ASP A   1      11.104   6.134  -6.504  1.00  0.00           N";

    #[test]
    fn parses_reference_record() {
        let s = parse_pdb(ASP_N).unwrap();
        let atom = &s.topology.atoms()[0];
        assert_eq!(atom.name, "N");
        assert_eq!(atom.residue_name, "ASP");
        assert_eq!(atom.residue_index, 0);
        assert_eq!(atom.element, Element::N);
        assert_eq!(s.coordinates[0], [11.104, 6.134, -6.504]);
    }

    #[test]
    fn empty_document_is_rejected() {
        let err = parse_topology("").unwrap_err();
        assert!(err.to_string().contains("no ATOM records"), "{err}");
    }

    #[test]
    fn atoms_sharing_a_sequence_number_form_one_residue() {
        let text = format!(
            "{ASP_N}\nATOM      2  CA  ASP A   1      12.000   6.000  -6.000  1.00  0.00           C\n"
        );
        let top = parse_topology(&text).unwrap();
        assert_eq!(top.n_residues(), 1);
        assert_eq!(top.residues()[0].atoms, 0..2);
    }

    #[test]
    fn element_falls_back_to_atom_name() {
        let line = "ATOM      1  CB  ALA A   1       1.000   2.000   3.000";
        let top = parse_topology(line).unwrap();
        assert_eq!(top.atoms()[0].element, Element::C);
    }

    #[test]
    fn unknown_element_names_the_symbol() {
        let line = "ATOM      1 FE   HEM A   1       1.000   2.000   3.000  1.00  0.00          FE";
        match parse_topology(line) {
            Err(Error::UnknownElement(sym)) => assert_eq!(sym, "FE"),
            other => panic!("expected unknown element, got {other:?}"),
        }
    }

    #[test]
    fn malformed_coordinate_reports_line() {
        let text = format!("REMARK test\n{}", ASP_N.replace("11.104", "11.1x4"));
        match parse_topology(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn alternate_locations_other_than_a_are_dropped() {
        let a = "ATOM      1  CA AALA A   1       1.000   2.000   3.000  0.50  0.00           C";
        let b = "ATOM      2  CA BALA A   1       1.500   2.000   3.000  0.50  0.00           C";
        let top = parse_topology(&format!("{a}\n{b}\n")).unwrap();
        assert_eq!(top.n_atoms(), 1);
    }

    #[test]
    fn chains_are_concatenated_in_file_order() {
        let a = "ATOM      1  CA  ALA A   1       1.000   2.000   3.000  1.00  0.00           C";
        let b = "ATOM      2  CA  GLY B   1       4.000   2.000   3.000  1.00  0.00           C";
        let top = parse_topology(&format!("{a}\nTER\n{b}\nEND\n")).unwrap();
        assert_eq!(top.n_residues(), 2);
        assert_eq!(top.residues()[1].chain, 'B');
    }

    #[test]
    fn write_then_parse_round_trips() {
        let text = format!(
            "{ASP_N}\nATOM      2  CA  ASP A   1      12.000   6.000  -6.000  1.00  0.00           C\n\
             ATOM      3  OXT GLY A   2      13.250  -0.125   0.500  1.00  0.00           O\n"
        );
        let s = parse_pdb(&text).unwrap();
        let written = write_pdb(&s.topology, &s.coordinates).unwrap();
        let again = parse_pdb(&written).unwrap();
        assert_eq!(again, s);
    }
}
