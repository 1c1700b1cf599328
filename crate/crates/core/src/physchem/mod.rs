//! Physical descriptors of conformations: radius of gyration, solvent-accessible
//! surface area (total and per residue), rigid superposition and RMSF.

pub mod kabsch;
pub mod sasa;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::trajectory::{Topology, Trajectory, Vec3};
use crate::{Error, Result};

pub use kabsch::{kabsch_align, Superposition};
pub use sasa::{res_sasa, sasa, SasaParams, SasaResult};

/// The global physical prior of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalFeatures {
    pub rg: f64,
    pub sasa_total: f64,
}

impl PhysicalFeatures {
    pub fn as_vector(&self) -> [f64; 2] {
        [self.rg, self.sasa_total]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidueMetrics {
    pub rmsf: Vec<f64>,
    /// Time-averaged per-residue SASA.
    pub res_sasa: Vec<f64>,
}

/// Mass-weighted radius of gyration over all atoms, or heavy atoms only.
pub fn radius_of_gyration(coords: &[Vec3], topology: &Topology, heavy_only: bool) -> Result<f64> {
    if coords.len() != topology.n_atoms() {
        return Err(Error::Consistency(format!(
            "{} coordinates for {} atoms",
            coords.len(),
            topology.n_atoms()
        )));
    }
    let selected: Vec<(f64, &Vec3)> = topology
        .atoms()
        .iter()
        .zip(coords)
        .filter(|(a, _)| !heavy_only || a.element.is_heavy())
        .map(|(a, p)| (a.mass, p))
        .collect();
    if selected.is_empty() {
        return Err(Error::InvalidInput("radius of gyration of zero selected atoms".into()));
    }
    let total_mass: f64 = selected.iter().map(|(m, _)| m).sum();
    let mut com = [0.0; 3];
    for (m, p) in &selected {
        for k in 0..3 {
            com[k] += m * p[k];
        }
    }
    com.iter_mut().for_each(|c| *c /= total_mass);
    let sq: f64 = selected
        .iter()
        .map(|(m, p)| m * (0..3).map(|k| (p[k] - com[k]).powi(2)).sum::<f64>())
        .sum();
    Ok((sq / total_mass).sqrt())
}

/// Heavy-atom Rg and total SASA of a single frame.
pub fn frame_features(coords: &[Vec3], topology: &Topology, params: &SasaParams) -> Result<PhysicalFeatures> {
    Ok(PhysicalFeatures {
        rg: radius_of_gyration(coords, topology, true)?,
        sasa_total: sasa(coords, topology, params)?.total,
    })
}

/// Per-frame features; frames are processed in parallel, results are in frame order.
pub fn physical_features(traj: &Trajectory, params: &SasaParams) -> Result<Vec<PhysicalFeatures>> {
    let top = traj.topology();
    (0..traj.n_frames())
        .into_par_iter()
        .map(|i| frame_features(traj.frame(i), top, params))
        .collect()
}

fn heavy_positions(coords: &[Vec3], heavy: &[usize]) -> Vec<Vec3> {
    heavy.iter().map(|&i| coords[i]).collect()
}

/// Per-residue RMSF of heavy-atom centroids after two-pass superposition
/// (align to frame 0, average, re-align to the average).
pub fn rmsf(traj: &Trajectory) -> Result<Vec<f64>> {
    let top = traj.topology();
    if traj.n_frames() < 2 {
        return Err(Error::InvalidInput(format!(
            "RMSF needs at least 2 frames, got {}",
            traj.n_frames()
        )));
    }
    let heavy: Vec<usize> = (0..top.n_atoms()).filter(|&i| top.atoms()[i].element.is_heavy()).collect();
    let weights = vec![1.0; heavy.len()];
    let frames: Vec<Vec<Vec3>> = traj.frames().map(|f| heavy_positions(f, &heavy)).collect();

    let align_all = |reference: &[Vec3]| -> Result<Vec<Vec<Vec3>>> {
        frames
            .iter()
            .map(|f| {
                let s = kabsch_align(f, reference, &weights)?;
                Ok(f.iter().map(|p| s.apply(p)).collect())
            })
            .collect()
    };
    let mean_of = |aligned: &[Vec<Vec3>]| -> Vec<Vec3> {
        let n = aligned.len() as f64;
        (0..heavy.len())
            .map(|a| {
                let mut m = [0.0; 3];
                for f in aligned {
                    for k in 0..3 {
                        m[k] += f[a][k];
                    }
                }
                m.map(|v| v / n)
            })
            .collect()
    };

    let first = align_all(&frames[0])?;
    let mean = mean_of(&first);
    let aligned = align_all(&mean)?;

    // Map each residue to its heavy atoms' positions within the heavy list.
    let mut slot = vec![usize::MAX; top.n_atoms()];
    for (k, &i) in heavy.iter().enumerate() {
        slot[i] = k;
    }
    let members: Vec<Vec<usize>> = (0..top.n_residues())
        .map(|r| top.heavy_atoms(r).map(|i| slot[i]).collect())
        .collect();
    if let Some(r) = members.iter().position(Vec::is_empty) {
        return Err(Error::InvalidInput(format!("residue {r} has no heavy atoms")));
    }
    let centroid = |f: &[Vec3], atoms: &[usize]| -> Vec3 {
        let mut c = [0.0; 3];
        for &a in atoms {
            for k in 0..3 {
                c[k] += f[a][k];
            }
        }
        c.map(|v| v / atoms.len() as f64)
    };

    let n = aligned.len() as f64;
    Ok(members
        .iter()
        .map(|atoms| {
            let xs: Vec<Vec3> = aligned.iter().map(|f| centroid(f, atoms)).collect();
            let mut mean = [0.0; 3];
            for x in &xs {
                for k in 0..3 {
                    mean[k] += x[k] / n;
                }
            }
            let msd: f64 = xs
                .iter()
                .map(|x| (0..3).map(|k| (x[k] - mean[k]).powi(2)).sum::<f64>())
                .sum::<f64>()
                / n;
            msd.sqrt()
        })
        .collect())
}

/// RMSF plus time-averaged per-residue SASA.
pub fn residue_metrics(traj: &Trajectory, params: &SasaParams) -> Result<ResidueMetrics> {
    let (_, res_sasa) = features_and_residue_sasa(traj, params)?;
    Ok(ResidueMetrics { rmsf: rmsf(traj)?, res_sasa })
}

/// Per-frame features and time-averaged per-residue SASA from one SASA pass per
/// frame. Totals are identical to [`frame_features`].
pub fn features_and_residue_sasa(traj: &Trajectory, params: &SasaParams) -> Result<(Vec<PhysicalFeatures>, Vec<f64>)> {
    let top = traj.topology();
    let per_frame: Vec<(PhysicalFeatures, Vec<f64>)> = (0..traj.n_frames())
        .into_par_iter()
        .map(|i| {
            let coords = traj.frame(i);
            let result = sasa(coords, top, params)?;
            let rg = radius_of_gyration(coords, top, true)?;
            let residues = sasa::per_residue(&result, top);
            Ok((PhysicalFeatures { rg, sasa_total: result.total }, residues))
        })
        .collect::<Result<_>>()?;
    let mut mean = vec![0.0; top.n_residues()];
    for (_, row) in &per_frame {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / per_frame.len() as f64;
        }
    }
    Ok((per_frame.into_iter().map(|(f, _)| f).collect(), mean))
}

/// `frame,rg,sasa_total` rows.
pub fn metrics_csv(features: &[PhysicalFeatures]) -> String {
    let mut out = String::from("frame,rg,sasa_total\n");
    for (i, f) in features.iter().enumerate() {
        writeln!(out, "{i},{:?},{:?}", f.rg, f.sasa_total).expect("string write");
    }
    out
}

/// `residue_index,rmsf,res_sasa` rows.
pub fn residue_csv(metrics: &ResidueMetrics) -> String {
    let mut out = String::from("residue_index,rmsf,res_sasa\n");
    for (i, (r, s)) in metrics.rmsf.iter().zip(&metrics.res_sasa).enumerate() {
        writeln!(out, "{i},{r:?},{s:?}").expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::Element;
    use std::sync::Arc;

    fn carbons(n: usize) -> Arc<Topology> {
        let residues: Vec<(&str, Vec<(&str, Element)>)> =
            (0..n).map(|_| ("GLY", vec![("CA", Element::C)])).collect();
        Arc::new(Topology::from_residues(&residues).unwrap())
    }

    #[test]
    fn rg_reference_values() {
        let top = carbons(1);
        assert!(radius_of_gyration(&[[4.0, 5.0, 6.0]], &top, true).unwrap() < 1e-12);
        let top = carbons(2);
        assert!((radius_of_gyration(&[[0.0; 3], [2.0, 0.0, 0.0]], &top, false).unwrap() - 1.0).abs() < 1e-15);
        let top = carbons(4);
        let square = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]];
        assert!((radius_of_gyration(&square, &top, false).unwrap() - 0.5_f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rg_needs_selected_atoms() {
        let top = Topology::from_residues(&[("GLY", vec![("H1", Element::H)])]).unwrap();
        assert!(radius_of_gyration(&[[0.0; 3]], &top, true).is_err());
        assert_eq!(radius_of_gyration(&[[0.0; 3]], &top, false).unwrap(), 0.0);
    }

    #[test]
    fn static_trajectory_has_zero_rmsf() {
        let top = carbons(4);
        let frame = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.5, 0.0], [0.0, 1.0, 2.0]];
        let coords: Vec<Vec3> = (0..5).flat_map(|_| frame).collect();
        let traj = Trajectory::new(top, coords, 1.0).unwrap();
        assert!(rmsf(&traj).unwrap().iter().all(|&v| v < 1e-12));
    }

    #[test]
    fn single_frame_rmsf_is_an_error() {
        let top = carbons(3);
        let traj = Trajectory::new(top, vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], 1.0).unwrap();
        assert!(rmsf(&traj).is_err());
    }

    #[test]
    fn oscillating_residue_on_an_octahedron() {
        // Centre residue oscillates +-a along x; the six others sit on the axes.
        // The superposition absorbs a translation of a/N along x, so the centre
        // residue keeps a(1 - 1/N) and every x-axis neighbour picks up a/N.
        let a = 0.4;
        let l = 3.0;
        let top = carbons(7);
        let base = [[0.0; 3], [l, 0.0, 0.0], [-l, 0.0, 0.0], [0.0, l, 0.0], [0.0, -l, 0.0], [0.0, 0.0, l], [0.0, 0.0, -l]];
        let mut coords = Vec::new();
        for t in 0..6 {
            let mut f = base;
            f[0][0] = if t % 2 == 0 { a } else { -a };
            coords.extend_from_slice(&f);
        }
        let traj = Trajectory::new(top, coords, 1.0).unwrap();
        let r = rmsf(&traj).unwrap();
        let n = 7.0;
        assert!((r[0] - a * (1.0 - 1.0 / n)).abs() < 1e-12, "{r:?}");
        for &v in &r[1..] {
            assert!((v - a / n).abs() < 1e-12, "{r:?}");
        }
    }

    #[test]
    fn csv_headers() {
        let f = [PhysicalFeatures { rg: 1.5, sasa_total: 100.0 }];
        assert_eq!(metrics_csv(&f), "frame,rg,sasa_total\n0,1.5,100.0\n");
        let m = ResidueMetrics { rmsf: vec![0.25], res_sasa: vec![3.0] };
        assert_eq!(residue_csv(&m), "residue_index,rmsf,res_sasa\n0,0.25,3.0\n");
    }
}
