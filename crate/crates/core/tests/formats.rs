use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use pis_core::autodiff::{checkpoint, Tensor};
use pis_core::synth::{generate, HmmSpec};
use pis_core::trajectory::manifest::{DatasetManifest, ManifestEntry};
use pis_core::trajectory::pdb::{parse_pdb, write_pdb};
use pis_core::trajectory::pistrj::{read_frames, slice_frames, write_frames, HEADER_LEN};
use pis_core::trajectory::{Element, Topology, Trajectory};
use pis_core::Error;
use proptest::prelude::*;

fn fixture(kind: &str, name: &str) -> String {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "tests", "fixtures", "pdb", kind, name].iter().collect();
    fs::read_to_string(path).unwrap()
}

#[test]
fn valid_fixtures_parse() {
    let expected = [
        ("single_atom.pdb", 1, 1),
        ("dipeptide_hydrogens.pdb", 9, 2),
        ("two_chains.pdb", 4, 2),
        ("alternate_locations.pdb", 3, 1),
        ("no_element_columns.pdb", 4, 1),
        ("mixed_records.pdb", 3, 2),
        ("crlf_line_endings.pdb", 2, 1),
    ];
    for (name, atoms, residues) in expected {
        let s = parse_pdb(&fixture("valid", name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(s.topology.n_atoms(), atoms, "{name}");
        assert_eq!(s.topology.n_residues(), residues, "{name}");
    }
}

#[test]
fn valid_fixture_details() {
    let s = parse_pdb(&fixture("valid", "single_atom.pdb")).unwrap();
    assert_eq!(s.topology.atoms()[0].name, "N");
    assert_eq!(s.topology.residues()[0].name, "ASP");
    assert_eq!(s.coordinates[0], [11.104, 6.134, -6.504]);

    let s = parse_pdb(&fixture("valid", "two_chains.pdb")).unwrap();
    let chains: Vec<char> = s.topology.residues().iter().map(|r| r.chain).collect();
    assert_eq!(chains, vec!['A', 'B']);
    assert_eq!(s.topology.atoms()[1].element, Element::S);

    let s = parse_pdb(&fixture("valid", "alternate_locations.pdb")).unwrap();
    assert_eq!(s.coordinates[1], [1.0, 0.0, 0.0]);

    let s = parse_pdb(&fixture("valid", "no_element_columns.pdb")).unwrap();
    let elements: Vec<Element> = s.topology.atoms().iter().map(|a| a.element).collect();
    assert_eq!(elements, vec![Element::N, Element::C, Element::N, Element::H]);

    let s = parse_pdb(&fixture("valid", "dipeptide_hydrogens.pdb")).unwrap();
    assert_eq!(s.topology.residues()[1].atoms, 5..9);
    assert_eq!(s.topology.atoms()[4].vdw_radius, 1.20);
}

#[test]
fn malformed_fixtures_are_rejected() {
    let lines = [
        ("short_record.pdb", 2),
        ("bad_coordinate.pdb", 3),
        ("bad_residue_number.pdb", 1),
        ("blank_atom_name.pdb", 1),
        ("non_finite_coordinate.pdb", 1),
    ];
    for (name, line) in lines {
        match parse_pdb(&fixture("malformed", name)) {
            Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{name}"),
            other => panic!("{name}: {other:?}"),
        }
    }
    match parse_pdb(&fixture("malformed", "empty.pdb")) {
        Err(Error::Parse { msg, .. }) => assert_eq!(msg, "no ATOM records"),
        other => panic!("{other:?}"),
    }
    match parse_pdb(&fixture("malformed", "unknown_element.pdb")) {
        Err(e @ Error::UnknownElement(_)) => assert!(e.to_string().contains("FE"), "{e}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn reference_header_example() {
    let topo = Arc::new(Topology::from_residues(&[("GLY", vec![("N", Element::N), ("CA", Element::C), ("C", Element::C)])]).unwrap());
    let t = Trajectory::new(topo.clone(), vec![[0.5, 1.0, -2.0]; 6], 250.0).unwrap();
    let bytes = write_frames(&t);
    assert_eq!(bytes.len(), HEADER_LEN + 72);
    let back = read_frames(&bytes, topo.clone()).unwrap();
    assert_eq!(back.n_frames(), 2);
    assert_eq!(back.dt_ps(), 250.0);
    assert!(matches!(read_frames(&bytes[..bytes.len() - 4], topo), Err(Error::Truncated { .. })));
}

#[test]
fn synthetic_trajectory_bytes_are_stable() {
    let (t, _) = generate(&HmmSpec::default(), 50, 4).unwrap();
    let bytes = write_frames(&t);
    let back = read_frames(&bytes, t.topology().clone()).unwrap();
    assert_eq!(write_frames(&back), bytes);
    assert_eq!(read_frames(&write_frames(&back), t.topology().clone()).unwrap(), back);
}

fn f32_coords(n: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(prop::array::uniform3(-500.0f32..500.0), n)
        .prop_map(|v| v.into_iter().map(|p| p.map(f64::from)).collect())
}

fn small_topology() -> Arc<Topology> {
    Arc::new(
        Topology::from_residues(&[
            ("ALA", vec![("N", Element::N), ("CA", Element::C)]),
            ("SER", vec![("N", Element::N), ("OG", Element::O), ("HG", Element::H)]),
        ])
        .unwrap(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pistrj_round_trip_is_bit_exact(frames in 0usize..6, coords in f32_coords(30), dt in 0.5f32..1000.0) {
        let topo = small_topology();
        let coords: Vec<[f64; 3]> = coords.into_iter().cycle().take(frames * 5).collect();
        let t = Trajectory::new(topo.clone(), coords, f64::from(dt)).unwrap();
        let bytes = write_frames(&t);
        let back = read_frames(&bytes, topo).unwrap();
        prop_assert_eq!(&back, &t);
        prop_assert_eq!(write_frames(&back), bytes);
    }

    #[test]
    fn frame_slices_concatenate_to_the_payload(coords in f32_coords(40), cut in 0usize..8) {
        let topo = small_topology();
        let t = Trajectory::new(topo, coords, 250.0).unwrap();
        let bytes = write_frames(&t);
        let head = slice_frames(&bytes, 0, cut).unwrap();
        let tail = slice_frames(&bytes, cut, 8 - cut).unwrap();
        prop_assert_eq!(&head[..HEADER_LEN], &write_frames(&t.slice(0, cut).unwrap())[..HEADER_LEN]);
        prop_assert_eq!([&head[HEADER_LEN..], &tail[HEADER_LEN..]].concat(), bytes[HEADER_LEN..].to_vec());
        let joined = Trajectory::concat(&[t.slice(0, cut).unwrap(), t.slice(cut, 8).unwrap()]).unwrap();
        prop_assert_eq!(joined.coordinates(), t.coordinates());
    }

    #[test]
    fn pdb_write_parse_keeps_retained_fields(coords in prop::collection::vec(prop::array::uniform3(-999i32..9999), 5)) {
        let topo = small_topology();
        let coords: Vec<[f64; 3]> = coords.iter().map(|p| p.map(|v| f64::from(v) / 1000.0 * 9.0)).collect();
        let rounded: Vec<[f64; 3]> = coords.iter().map(|p| p.map(|v| format!("{v:.3}").parse().unwrap())).collect();
        let text = write_pdb(&topo, &coords).unwrap();
        let s = parse_pdb(&text).unwrap();
        prop_assert_eq!(&s.topology, topo.as_ref());
        prop_assert_eq!(&s.coordinates, &rounded);
        prop_assert_eq!(parse_pdb(&write_pdb(&s.topology, &s.coordinates).unwrap()).unwrap(), s);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        tensors in prop::collection::vec((1usize..5, 1usize..5, prop::collection::vec(any::<f64>(), 16)), 0..6)
    ) {
        let named: Vec<(String, Tensor)> = tensors
            .into_iter()
            .enumerate()
            .map(|(i, (r, c, v))| (format!("t{i}"), Tensor::matrix(r, c, v[..r * c].to_vec()).unwrap()))
            .collect();
        let bytes = checkpoint::encode(&named);
        let back = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.len(), named.len());
        for ((na, ta), (nb, tb)) in named.iter().zip(&back) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(ta.shape(), tb.shape());
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits_a, bits_b);
        }
        prop_assert_eq!(checkpoint::encode(&back), bytes);
    }

    #[test]
    fn manifest_totals_match_entries(lengths in prop::collection::vec(0usize..5000, 0..20)) {
        let entries: Vec<ManifestEntry> = lengths
            .iter()
            .enumerate()
            .map(|(i, &n)| ManifestEntry { path: format!("traj{i}.pistrj"), n_frames: n })
            .collect();
        let m = DatasetManifest::from_entries(entries);
        prop_assert_eq!(m.totals.n_trajectories, lengths.len());
        prop_assert_eq!(m.totals.n_frames_total, lengths.iter().sum::<usize>());
        let back = DatasetManifest::from_json(&m.to_json()).unwrap();
        prop_assert_eq!(back, m);
    }
}
