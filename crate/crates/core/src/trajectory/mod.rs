//! Topologies, trajectories and the on-disk formats they travel in.
//!
//! Coordinates are held as `f64` in memory and stored as `f32` on disk
//! (see [`pistrj`]). Topologies come from the ATOM-record subset of PDB v3.3
//! (see [`pdb`]).

pub mod manifest;
pub mod pdb;
pub mod pistrj;

use std::sync::Arc;

use crate::{Error, Result};

pub use manifest::{DatasetManifest, ManifestEntry, ManifestTotals};

/// Residue count of the full-length amyloid-beta peptide.
pub const AB42_RESIDUES: usize = 42;
/// Stored frame interval of the reference all-atom dataset, in ps.
pub const REFERENCE_DT_PS: f32 = 250.0;
/// Trajectory count of the reference dataset.
pub const REFERENCE_TRAJECTORIES: usize = 5119;
/// Total frame count of the reference dataset.
pub const REFERENCE_FRAMES: usize = 1_259_172;

/// A cartesian position in Å.
pub type Vec3 = [f64; 3];

/// Chemical elements the pipeline knows radii and masses for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Element {
    H,
    C,
    N,
    O,
    S,
    P,
}

impl Element {
    pub fn from_symbol(symbol: &str) -> Result<Self> {
        match symbol.trim().to_ascii_uppercase().as_str() {
            "H" => Ok(Element::H),
            "C" => Ok(Element::C),
            "N" => Ok(Element::N),
            "O" => Ok(Element::O),
            "S" => Ok(Element::S),
            "P" => Ok(Element::P),
            other => Err(Error::UnknownElement(other.to_string())),
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Element::H => "H",
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::S => "S",
            Element::P => "P",
        }
    }

    /// Bondi van der Waals radius in Å.
    pub fn vdw_radius(self) -> f64 {
        match self {
            Element::H => 1.20,
            Element::C => 1.70,
            Element::N => 1.55,
            Element::O => 1.52,
            Element::S => 1.80,
            Element::P => 1.80,
        }
    }

    /// Standard atomic weight in amu.
    pub fn mass(self) -> f64 {
        match self {
            Element::H => 1.008,
            Element::C => 12.011,
            Element::N => 14.007,
            Element::O => 15.999,
            Element::S => 32.06,
            Element::P => 30.974,
        }
    }

    pub fn is_heavy(self) -> bool {
        self != Element::H
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub name: String,
    pub element: Element,
    pub residue_index: usize,
    pub residue_name: String,
    pub mass: f64,
    pub vdw_radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Residue {
    pub name: String,
    pub chain: char,
    pub seq: i32,
    /// Half-open atom index range `[start, end)`.
    pub atoms: std::ops::Range<usize>,
}

/// The 20 standard amino acids, in the order used by residue embeddings.
pub const AMINO_ACIDS: [&str; 20] = [
    "ALA", "ARG", "ASN", "ASP", "CYS", "GLN", "GLU", "GLY", "HIS", "ILE", "LEU", "LYS", "MET",
    "PHE", "PRO", "SER", "THR", "TRP", "TYR", "VAL",
];

/// Index of a residue name in [`AMINO_ACIDS`]; protonation variants map to their parent.
pub fn amino_acid_index(name: &str) -> Option<usize> {
    let canonical = match name {
        "HSD" | "HSE" | "HSP" | "HID" | "HIE" | "HIP" => "HIS",
        "ASH" => "ASP",
        "GLH" => "GLU",
        "LYN" => "LYS",
        "CYX" | "CYM" => "CYS",
        other => other,
    };
    AMINO_ACIDS.iter().position(|&aa| aa == canonical)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    atoms: Vec<Atom>,
    residues: Vec<Residue>,
}

impl Topology {
    /// Builds a topology, checking that residue ranges tile the atom list and every
    /// atom points back at the residue that contains it.
    pub fn new(atoms: Vec<Atom>, residues: Vec<Residue>) -> Result<Self> {
        let mut expected_start = 0;
        for (ri, res) in residues.iter().enumerate() {
            if res.atoms.start != expected_start || res.atoms.end <= res.atoms.start {
                return Err(Error::Consistency(format!(
                    "residue {ri} range {:?} does not continue the partition at {expected_start}",
                    res.atoms
                )));
            }
            for ai in res.atoms.clone() {
                let atom = atoms.get(ai).ok_or_else(|| {
                    Error::Consistency(format!("residue {ri} references missing atom {ai}"))
                })?;
                if atom.residue_index != ri {
                    return Err(Error::Consistency(format!(
                        "atom {ai} claims residue {} but lies in residue {ri}",
                        atom.residue_index
                    )));
                }
            }
            expected_start = res.atoms.end;
        }
        if expected_start != atoms.len() {
            return Err(Error::Consistency(format!(
                "residues cover {expected_start} of {} atoms",
                atoms.len()
            )));
        }
        for (ai, atom) in atoms.iter().enumerate() {
            if !(atom.mass > 0.0 && atom.vdw_radius > 0.0) {
                return Err(Error::Consistency(format!(
                    "atom {ai} has non-positive mass or radius"
                )));
            }
        }
        Ok(Self { atoms, residues })
    }

    /// Convenience constructor: one entry per residue, each a list of
    /// `(atom name, element)`. Residues are numbered from 1 on chain A.
    pub fn from_residues(residues: &[(&str, Vec<(&str, Element)>)]) -> Result<Self> {
        let mut atoms = Vec::new();
        let mut res_out = Vec::new();
        for (ri, (res_name, res_atoms)) in residues.iter().enumerate() {
            let start = atoms.len();
            for (name, element) in res_atoms {
                atoms.push(Atom {
                    name: name.to_string(),
                    element: *element,
                    residue_index: ri,
                    residue_name: res_name.to_string(),
                    mass: element.mass(),
                    vdw_radius: element.vdw_radius(),
                });
            }
            res_out.push(Residue {
                name: res_name.to_string(),
                chain: 'A',
                seq: ri as i32 + 1,
                atoms: start..atoms.len(),
            });
        }
        Self::new(atoms, res_out)
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn residues(&self) -> &[Residue] {
        &self.residues
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn n_residues(&self) -> usize {
        self.residues.len()
    }

    /// Heavy-atom indices of residue `r`.
    pub fn heavy_atoms(&self, r: usize) -> impl Iterator<Item = usize> + '_ {
        self.residues[r]
            .atoms
            .clone()
            .filter(move |&i| self.atoms[i].element.is_heavy())
    }

    /// Embedding indices for every residue; errors on non-standard residue names.
    pub fn residue_types(&self) -> Result<Vec<usize>> {
        self.residues
            .iter()
            .map(|r| {
                amino_acid_index(&r.name).ok_or_else(|| {
                    Error::InvalidInput(format!("non-standard residue name '{}'", r.name))
                })
            })
            .collect()
    }
}

/// Frames of coordinates over a shared topology.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    topology: Arc<Topology>,
    coordinates: Vec<Vec3>,
    n_frames: usize,
    dt_ps: f64,
}

impl Trajectory {
    /// `coordinates` is frame-major: `n_frames * n_atoms` positions.
    pub fn new(topology: Arc<Topology>, coordinates: Vec<Vec3>, dt_ps: f64) -> Result<Self> {
        let n_atoms = topology.n_atoms();
        if !(dt_ps > 0.0 && dt_ps.is_finite()) {
            return Err(Error::Consistency(format!("dt_ps must be positive, got {dt_ps}")));
        }
        if n_atoms == 0 {
            if !coordinates.is_empty() {
                return Err(Error::Consistency("coordinates given for empty topology".into()));
            }
        } else if coordinates.len() % n_atoms != 0 {
            return Err(Error::Consistency(format!(
                "{} positions is not a multiple of {n_atoms} atoms",
                coordinates.len()
            )));
        }
        if let Some(i) = coordinates.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite(format!("coordinate of position {i}")));
        }
        let n_frames = if n_atoms == 0 { 0 } else { coordinates.len() / n_atoms };
        Ok(Self { topology, coordinates, n_frames, dt_ps })
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_atoms(&self) -> usize {
        self.topology.n_atoms()
    }

    pub fn dt_ps(&self) -> f64 {
        self.dt_ps
    }

    pub fn is_empty(&self) -> bool {
        self.n_frames == 0
    }

    pub fn frame(&self, i: usize) -> &[Vec3] {
        let n = self.n_atoms();
        &self.coordinates[i * n..(i + 1) * n]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[Vec3]> {
        let n = self.n_atoms().max(1);
        self.coordinates.chunks_exact(n)
    }

    pub fn coordinates(&self) -> &[Vec3] {
        &self.coordinates
    }

    /// Frames `[start, end)` as a new trajectory.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.n_frames {
            return Err(Error::InvalidInput(format!(
                "frame range [{start}, {end}) outside 0..{}",
                self.n_frames
            )));
        }
        let n = self.n_atoms();
        Self::new(
            self.topology.clone(),
            self.coordinates[start * n..end * n].to_vec(),
            self.dt_ps,
        )
    }

    /// Concatenates trajectories that share a topology and time step.
    pub fn concat(parts: &[Trajectory]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("nothing to concatenate".into()))?;
        let mut coords = Vec::new();
        for p in parts {
            if p.topology != first.topology || p.dt_ps != first.dt_ps {
                return Err(Error::Consistency(
                    "concatenated trajectories differ in topology or time step".into(),
                ));
            }
            coords.extend_from_slice(&p.coordinates);
        }
        Self::new(first.topology.clone(), coords, first.dt_ps)
    }
}
