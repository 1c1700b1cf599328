//! Synthetic metastable trajectories with known kinetics.
//!
//! A hidden Markov chain over `m` states picks one of `m` fixed chain folds per
//! frame; every atom is displaced by isotropic Gaussian noise. The generating
//! transition matrix gives exact reference scores.
//!
//! # Random stream
//!
//! All randomness comes from [`CounterRng`], a counter-based generator that is
//! straightforward to reproduce in any language:
//!
//! ```text
//! mix(z)    = z ^= z >> 30; z *= 0xbf58476d1ce4e5b9;
//!             z ^= z >> 27; z *= 0x94d049bb133111eb; z ^ (z >> 31)   (wrapping u64)
//! key       = mix(seed ^ (stream * 0xd1342543de82ef95))
//! draw(c)   = mix(key + c * 0x9e3779b97f4a7c15),   c = 1, 2, 3, ...
//! uniform   = (draw >> 11) * 2^-53                  in [0, 1)
//! normal    = sqrt(-2 ln(1 - u1)) * cos(2π u2)     from two consecutive uniforms
//! ```
//!
//! Trajectory `t` of a set uses stream `2t` for the hidden chain and `2t + 1`
//! for the emission noise.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::linalg::Mat;
use crate::physchem::kabsch_align;
use crate::trajectory::{Element, Topology, Trajectory, Vec3, REFERENCE_DT_PS};
use crate::{Error, Result};

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;
const STREAM_MUL: u64 = 0xd134_2543_de82_ef95;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { key: mix(seed ^ stream.wrapping_mul(STREAM_MUL)), counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        mix(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * PI * u2).cos()
    }

    /// Index drawn from a probability vector.
    pub fn categorical(&mut self, p: &[f64]) -> usize {
        let u = self.uniform();
        let mut acc = 0.0;
        for (i, &pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return i;
            }
        }
        p.len() - 1
    }
}

pub const ATOM_NAMES: [&str; 3] = ["N", "CA", "C"];
pub const ATOM_ELEMENTS: [Element; 3] = [Element::N, Element::C, Element::C];
/// The first ten residues of Aβ42.
pub const RESIDUE_NAMES: [&str; 10] = ["ASP", "ALA", "GLU", "PHE", "ARG", "HIS", "ASP", "SER", "GLY", "TYR"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmSpec {
    pub m_true: usize,
    pub transition: Vec<Vec<f64>>,
    /// Per state, `n_residues * atoms_per_residue` positions.
    pub templates: Vec<Vec<Vec3>>,
    pub emission_sigma: f64,
    pub n_residues: usize,
    pub atoms_per_residue: usize,
    pub dt_ps: f64,
}

/// Places three backbone-like atoms around each trace point.
fn dress(trace: &[Vec3]) -> Vec<Vec3> {
    let n = trace.len();
    let mut out = Vec::with_capacity(3 * n);
    for i in 0..n {
        let prev = trace[i.saturating_sub(1)];
        let next = trace[(i + 1).min(n - 1)];
        let mut t = [next[0] - prev[0], next[1] - prev[1], next[2] - prev[2]];
        let tn = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
        t.iter_mut().for_each(|v| *v /= tn);
        // A normal that is never parallel to the tangent.
        let helper = if t[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
        let mut nrm = [
            t[1] * helper[2] - t[2] * helper[1],
            t[2] * helper[0] - t[0] * helper[2],
            t[0] * helper[1] - t[1] * helper[0],
        ];
        let nn = (nrm[0] * nrm[0] + nrm[1] * nrm[1] + nrm[2] * nrm[2]).sqrt();
        nrm.iter_mut().for_each(|v| *v /= nn);
        let ca = trace[i];
        let at = |s: f64, h: f64| [ca[0] + s * t[0] + h * nrm[0], ca[1] + s * t[1] + h * nrm[1], ca[2] + s * t[2] + h * nrm[2]];
        out.push(at(-1.2, 0.6));
        out.push(ca);
        out.push(at(1.2, 0.6));
    }
    out
}

fn helix(n: usize, radius: f64, rise: f64, turn_deg: f64) -> Vec<Vec3> {
    (0..n)
        .map(|i| {
            let a = (turn_deg * i as f64).to_radians();
            [radius * a.cos(), radius * a.sin(), rise * i as f64]
        })
        .collect()
}

/// Extended strand, hairpin, left-handed coil and right-handed coil.
pub fn default_templates(n_residues: usize) -> Vec<Vec<Vec3>> {
    let extended: Vec<Vec3> = (0..n_residues).map(|i| [3.8 * i as f64, 0.0, 0.0]).collect();
    let half = n_residues / 2;
    let hairpin: Vec<Vec3> = (0..n_residues)
        .map(|i| if i < half { [3.8 * i as f64, 0.0, 0.0] } else { [3.8 * (n_residues - 1 - i) as f64, 5.0, 0.0] })
        .collect();
    let left: Vec<Vec3> = helix(n_residues, 4.5, 2.0, -80.0);
    let right: Vec<Vec3> = helix(n_residues, 2.3, 1.5, 100.0);
    [extended, hairpin, left, right].iter().map(|t| dress(t)).collect()
}

impl Default for HmmSpec {
    fn default() -> Self {
        let m = 4;
        let transition = (0..m).map(|i| (0..m).map(|j| if i == j { 0.97 } else { 0.01 }).collect()).collect();
        Self {
            m_true: m,
            transition,
            templates: default_templates(RESIDUE_NAMES.len()),
            emission_sigma: 0.3,
            n_residues: RESIDUE_NAMES.len(),
            atoms_per_residue: 3,
            dt_ps: REFERENCE_DT_PS as f64,
        }
    }
}

/// Kabsch RMSD of two equally sized point sets.
pub fn template_rmsd(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    Ok(kabsch_align(a, b, &vec![1.0; a.len()])?.rmsd)
}

impl HmmSpec {
    pub fn transition_matrix(&self) -> Mat {
        Mat::from_fn(self.m_true, self.m_true, |i, j| self.transition[i][j])
    }

    pub fn n_atoms(&self) -> usize {
        self.n_residues * self.atoms_per_residue
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m_true;
        if m < 1 || self.transition.len() != m || self.transition.iter().any(|r| r.len() != m) {
            return Err(Error::InvalidInput(format!("transition matrix must be {m}x{m}")));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.iter().any(|p| !(*p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput(format!("transition row {i} is not a probability vector")));
            }
        }
        if self.atoms_per_residue != ATOM_NAMES.len() {
            return Err(Error::InvalidInput(format!("{} atoms per residue; the generator places 3", self.atoms_per_residue)));
        }
        if self.n_residues < 2 || self.n_residues > RESIDUE_NAMES.len() * 100 {
            return Err(Error::InvalidInput(format!("{} residues", self.n_residues)));
        }
        if self.templates.len() != m || self.templates.iter().any(|t| t.len() != self.n_atoms()) {
            return Err(Error::InvalidInput(format!("need {m} templates of {} atoms", self.n_atoms())));
        }
        if !(self.emission_sigma >= 0.0) || !(self.dt_ps > 0.0) {
            return Err(Error::InvalidInput("emission sigma must be >= 0 and dt positive".into()));
        }
        for a in 0..m {
            for b in a + 1..m {
                let r = template_rmsd(&self.templates[a], &self.templates[b])?;
                if r <= 6.0 * self.emission_sigma {
                    return Err(Error::InvalidInput(format!(
                        "templates {a} and {b} are {r:.3} Å apart, need more than {:.3}",
                        6.0 * self.emission_sigma
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn topology(&self) -> Result<Topology> {
        let residues: Vec<(&str, Vec<(&str, Element)>)> = (0..self.n_residues)
            .map(|r| (RESIDUE_NAMES[r % RESIDUE_NAMES.len()], ATOM_NAMES.iter().copied().zip(ATOM_ELEMENTS).collect()))
            .collect();
        Topology::from_residues(&residues)
    }

    pub fn stationary(&self) -> Result<Vec<f64>> {
        stationary_distribution(&self.transition_matrix())
    }

    /// Start distribution of the hidden chain: the stationary vector, or state 0
    /// when the chain is reducible.
    pub fn initial_distribution(&self) -> Vec<f64> {
        self.stationary().unwrap_or_else(|_| {
            let mut p = vec![0.0; self.m_true];
            p[0] = 1.0;
            p
        })
    }
}

/// Left Perron vector of a row-stochastic matrix, normalised to sum 1.
pub fn stationary_distribution(t: &Mat) -> Result<Vec<f64>> {
    let m = t.nrows();
    // Solve (Tᵀ - I) π = 0 with the last equation replaced by Σπ = 1.
    let mut a = t.transpose() - Mat::identity(m, m);
    let mut b = DVector::zeros(m);
    a.row_mut(m - 1).fill(1.0);
    b[m - 1] = 1.0;
    let pi = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Degenerate("transition matrix has no unique stationary distribution".into()))?;
    Ok(pi.iter().copied().collect())
}

/// One trajectory and its hidden labels.
pub fn generate(spec: &HmmSpec, n_frames: usize, seed: u64) -> Result<(Trajectory, Vec<usize>)> {
    generate_stream(spec, n_frames, seed, 0)
}

fn generate_stream(spec: &HmmSpec, n_frames: usize, seed: u64, index: u64) -> Result<(Trajectory, Vec<usize>)> {
    spec.validate()?;
    let topology = Arc::new(spec.topology()?);
    let pi = spec.initial_distribution();
    let mut chain = CounterRng::new(seed, 2 * index);
    let mut noise = CounterRng::new(seed, 2 * index + 1);
    let mut labels = Vec::with_capacity(n_frames);
    let mut coords = Vec::with_capacity(n_frames * spec.n_atoms());
    let mut state = 0;
    for f in 0..n_frames {
        state = if f == 0 { chain.categorical(&pi) } else { chain.categorical(&spec.transition[state]) };
        labels.push(state);
        for p in &spec.templates[state] {
            coords.push(std::array::from_fn(|k| p[k] + spec.emission_sigma * noise.normal()));
        }
    }
    Ok((Trajectory::new(topology, coords, spec.dt_ps)?, labels))
}

/// `n_trajectories` independent trajectories sharing one topology.
pub fn generate_set(spec: &HmmSpec, n_trajectories: usize, frames_each: usize, seed: u64) -> Result<Vec<(Trajectory, Vec<usize>)>> {
    (0..n_trajectories as u64).map(|t| generate_stream(spec, frames_each, seed, t)).collect()
}

/// Exact VAMP-2 of perfect assignments: `Σ λ_i(Tⁿ)²` for a reversible `T`.
pub fn oracle_vamp2(t: &Mat, lag: u32) -> Result<f64> {
    let m = t.nrows();
    let doubly_stochastic = (0..m).all(|j| (t.column(j).sum() - 1.0).abs() < 1e-12);
    let pi = match stationary_distribution(t) {
        Ok(pi) => pi,
        Err(_) if doubly_stochastic => vec![1.0 / m as f64; m],
        Err(e) => return Err(e),
    };
    for i in 0..m {
        for j in 0..m {
            let r = (pi[i] * t[(i, j)] - pi[j] * t[(j, i)]).abs();
            if r > 1e-10 {
                return Err(Error::InvalidInput(format!("transition matrix is not reversible (residual {r:.3e})")));
            }
        }
    }
    if pi.iter().any(|p| !(*p > 0.0)) {
        return Err(Error::InvalidInput("stationary distribution has empty states".into()));
    }
    // D^1/2 T D^-1/2 is symmetric with the same spectrum.
    let sym = Mat::from_fn(m, m, |i, j| pi[i].sqrt() * t[(i, j)] / pi[j].sqrt());
    let sym = (&sym + sym.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    Ok(eig.eigenvalues.iter().map(|l| l.powi(lag as i32).powi(2)).sum())
}

/// Row-normalised transition counts at `lag`, pooled over label sequences.
pub fn oracle_count_k(labels: &[Vec<usize>], lag: usize, m: usize) -> Result<Mat> {
    let mut counts = Mat::zeros(m, m);
    for seq in labels {
        for i in 0..seq.len().saturating_sub(lag) {
            let (a, b) = (seq[i], seq[i + lag]);
            if a >= m || b >= m {
                return Err(Error::InvalidInput(format!("label {} outside {m} states", a.max(b))));
            }
            counts[(a, b)] += 1.0;
        }
    }
    for i in 0..m {
        let total: f64 = counts.row(i).sum();
        if total == 0.0 {
            return Err(Error::InvalidInput(format!("state {i} is never visited at lag {lag}")));
        }
        counts.row_mut(i).scale_mut(1.0 / total);
    }
    Ok(counts)
}

/// `frame,state` rows.
pub fn labels_csv(labels: &[usize]) -> String {
    let mut out = String::from("frame,state\n");
    for (i, s) in labels.iter().enumerate() {
        out.push_str(&format!("{i},{s}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counter_stream_is_fixed() {
        let mut a = CounterRng::new(7, 0);
        let mut b = CounterRng::new(7, 0);
        let xs: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        assert_eq!(xs, (0..4).map(|_| b.next_u64()).collect::<Vec<_>>());
        assert_ne!(CounterRng::new(7, 1).next_u64(), xs[0]);
        let u: f64 = (0..10_000).map(|_| a.uniform()).sum::<f64>() / 10_000.0;
        assert!((u - 0.5).abs() < 0.01);
    }

    #[test]
    fn normals_have_unit_variance() {
        let mut r = CounterRng::new(1, 3);
        let xs: Vec<f64> = (0..50_000).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.02 && (var - 1.0).abs() < 0.03, "{mean} {var}");
    }

    #[test]
    fn default_templates_are_separated() {
        let spec = HmmSpec::default();
        spec.validate().unwrap();
        for a in 0..4 {
            for b in a + 1..4 {
                assert!(template_rmsd(&spec.templates[a], &spec.templates[b]).unwrap() > 4.0);
            }
        }
    }

    #[test]
    fn oracle_examples() {
        let spec = HmmSpec::default();
        let t = spec.transition_matrix();
        assert!((oracle_vamp2(&t, 1).unwrap() - 3.7648).abs() < 1e-12);
        assert!((oracle_vamp2(&Mat::identity(3, 3), 1).unwrap() - 3.0).abs() < 1e-12);
        assert!((oracle_vamp2(&t, 2000).unwrap() - 1.0).abs() < 1e-12);
        let irreversible = Mat::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.5, 0.0, 0.5]);
        assert!(oracle_vamp2(&irreversible, 1).is_err());
    }

    #[test]
    fn count_matrix_by_hand() {
        let k = oracle_count_k(&[vec![0, 0, 1, 1]], 1, 2).unwrap();
        assert_eq!(k, Mat::from_row_slice(2, 2, &[0.5, 0.5, 0.0, 1.0]));
        assert!(oracle_count_k(&[vec![0, 0, 0]], 1, 2).is_err());
        assert_eq!(oracle_count_k(&[vec![0, 0, 0]], 2, 1).unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn degenerate_generators() {
        let mut spec = HmmSpec::default();
        spec.emission_sigma = 0.0;
        let (traj, labels) = generate(&spec, 50, 3).unwrap();
        for (f, &s) in labels.iter().enumerate() {
            assert_eq!(traj.frame(f), spec.templates[s].as_slice());
        }
        spec.transition = (0..4).map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let (_, labels) = generate(&spec, 50, 3).unwrap();
        assert!(labels.iter().all(|&s| s == labels[0]));
    }
}
