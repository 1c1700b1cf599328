//! Chapman–Kolmogorov test, implied timescales, free-energy surfaces and
//! residue contributions.

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use super::covariances;
use crate::linalg::{matrix_power, spd_inverse, to_rows, Mat};
use crate::{Error, Result};

pub const DEFAULT_FES_BINS: usize = 64;

/// Paired rows `(t, t + lag)` pooled over trajectories.
fn lagged_pairs(trajectories: &[Mat], lag: usize) -> Option<(Mat, Mat)> {
    let m = trajectories.first()?.ncols();
    let n: usize = trajectories.iter().map(|t| t.nrows().saturating_sub(lag)).sum();
    if n == 0 {
        return None;
    }
    let mut x0 = Mat::zeros(n, m);
    let mut xt = Mat::zeros(n, m);
    let mut row = 0;
    for t in trajectories {
        for i in 0..t.nrows().saturating_sub(lag) {
            x0.set_row(row, &t.row(i));
            xt.set_row(row, &t.row(i + lag));
            row += 1;
        }
    }
    Some((x0, xt))
}

/// `(C00 + eps I)^-1 C0ℓ` with negative entries clipped and rows renormalised.
pub fn koopman_estimate(trajectories: &[Mat], lag: usize) -> Result<Mat> {
    let (x0, xt) = lagged_pairs(trajectories, lag)
        .ok_or_else(|| Error::InvalidInput(format!("no frame pairs at lag {lag}")))?;
    koopman_estimate_pairs(&x0, &xt, lag)
}

/// Clipped, row-renormalised `(C00 + eps I)⁻¹ C0τ` of paired rows.
pub fn koopman_estimate_pairs(x0: &Mat, xt: &Mat, lag: usize) -> Result<Mat> {
    let cov = covariances(x0, xt, None, lag)?;
    let ridge = &cov.c00 + Mat::identity(cov.m(), cov.m()) * cov.eps;
    let mut k = spd_inverse(&ridge)? * &cov.c0t;
    for i in 0..k.nrows() {
        let mut row_sum = 0.0;
        for j in 0..k.ncols() {
            k[(i, j)] = k[(i, j)].max(0.0);
            row_sum += k[(i, j)];
        }
        if row_sum > 0.0 {
            for j in 0..k.ncols() {
                k[(i, j)] /= row_sum;
            }
        } else {
            k.row_mut(i).fill(0.0);
            k[(i, i)] = 1.0;
        }
    }
    Ok(k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkTestResult {
    pub base_lag: usize,
    pub steps: usize,
    pub predicted: Vec<Vec<f64>>,
    pub estimated: Vec<Vec<f64>>,
    pub deviations: Vec<Vec<f64>>,
    pub max_abs_dev: f64,
}

/// Compares `K(τ)^n` with `K(nτ)` for `n = 1..=max_n`.
pub fn ck_test(trajectories: &[Mat], tau: usize, max_n: usize) -> Result<Vec<CkTestResult>> {
    if tau == 0 || max_n == 0 {
        return Err(Error::InvalidInput("lag and step count must be at least 1".into()));
    }
    let longest = trajectories.iter().map(Mat::nrows).max().unwrap_or(0);
    let required = max_n * tau + 1;
    if longest < required {
        return Err(Error::InvalidInput(format!(
            "insufficient frames: lag {tau} with {max_n} steps needs a trajectory of at least {required} frames, longest has {longest}"
        )));
    }
    let base = koopman_estimate(trajectories, tau)?;
    (1..=max_n)
        .map(|n| {
            let predicted = matrix_power(&base, n as u32);
            let estimated = if n == 1 { base.clone() } else { koopman_estimate(trajectories, n * tau)? };
            let dev = (&predicted - &estimated).abs();
            Ok(CkTestResult {
                base_lag: tau,
                steps: n,
                max_abs_dev: dev.iter().copied().fold(0.0, f64::max),
                predicted: to_rows(&predicted),
                estimated: to_rows(&estimated),
                deviations: to_rows(&dev),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timescale {
    /// `|λ|`
    pub modulus: f64,
    /// `None` when `|λ| >= 1` or `λ = 0`.
    pub timescale_ps: Option<f64>,
}

/// `t_i = −τ·dt / ln|λ_i|` for all but the largest-modulus eigenvalue.
pub fn implied_timescales(k: &Mat, tau: usize, dt_ps: f64) -> Result<Vec<Timescale>> {
    if !k.is_square() || k.nrows() == 0 {
        return Err(Error::Shape(format!("transition matrix is {:?}", k.shape())));
    }
    let mut moduli: Vec<f64> = k.complex_eigenvalues().iter().map(|c| c.norm()).collect();
    moduli.sort_by(|a, b| b.total_cmp(a));
    Ok(moduli
        .into_iter()
        .skip(1)
        .map(|modulus| {
            let flagged = modulus >= 1.0 - 1e-12 || modulus <= 0.0;
            Timescale { modulus, timescale_ps: (!flagged).then(|| -(tau as f64) * dt_ps / modulus.ln()) }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergySurface {
    pub pc1_edges: Vec<f64>,
    pub pc2_edges: Vec<f64>,
    /// `[pc1 bin][pc2 bin]`, kT units; `None` for empty bins.
    pub free_energy: Vec<Vec<Option<f64>>>,
    pub counts: Vec<Vec<usize>>,
    pub explained_variance: [f64; 2],
    pub components: [Vec<f64>; 2],
    pub mean: Vec<f64>,
    pub projections: Vec<[f64; 2]>,
}

fn edges_and_index(values: &[f64], bins: usize) -> (Vec<f64>, Vec<usize>) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
    let index = values
        .iter()
        .map(|v| (((v - lo) / (hi - lo)) * bins as f64).floor().clamp(0.0, (bins - 1) as f64) as usize)
        .collect();
    (edges, index)
}

/// PCA of the embeddings, a `bins x bins` histogram over the top-two projections
/// and `F = −ln(count / total)` shifted to a zero minimum.
pub fn free_energy_surface(z: &[Vec<f64>], bins: usize) -> Result<FreeEnergySurface> {
    let n = z.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!("free-energy surface needs at least 2 frames, got {n}")));
    }
    let d = z[0].len();
    if d < 2 || z.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidInput("embeddings must share a dimension of at least 2".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidInput("bins must be positive".into()));
    }
    let mean: Vec<f64> = (0..d).map(|k| z.iter().map(|r| r[k]).sum::<f64>() / n as f64).collect();
    let mut cov = Mat::zeros(d, d);
    for r in z {
        for a in 0..d {
            let da = r[a] - mean[a];
            for b in 0..d {
                cov[(a, b)] += da * (r[b] - mean[b]) / n as f64;
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("embeddings have zero variance in every direction".into()));
    }
    let components: [Vec<f64>; 2] = std::array::from_fn(|c| {
        let mut v: Vec<f64> = eig.eigenvectors.column(order[c]).iter().copied().collect();
        let pivot = v.iter().copied().fold(0.0, |acc: f64, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    });
    let explained_variance = std::array::from_fn(|c| eig.eigenvalues[order[c]].max(0.0) / total);
    let projections: Vec<[f64; 2]> = z
        .iter()
        .map(|r| std::array::from_fn(|c| (0..d).map(|k| (r[k] - mean[k]) * components[c][k]).sum()))
        .collect();

    let (pc1_edges, i1) = edges_and_index(&projections.iter().map(|p| p[0]).collect::<Vec<_>>(), bins);
    let (pc2_edges, i2) = edges_and_index(&projections.iter().map(|p| p[1]).collect::<Vec<_>>(), bins);
    let mut counts = vec![vec![0usize; bins]; bins];
    for (a, b) in i1.iter().zip(&i2) {
        counts[*a][*b] += 1;
    }
    let max_count = counts.iter().flatten().copied().max().unwrap_or(1);
    let offset = -(max_count as f64 / n as f64).ln();
    let free_energy = counts
        .iter()
        .map(|row| {
            row.iter()
                .map(|&c| (c > 0).then(|| -(c as f64 / n as f64).ln() - offset))
                .collect()
        })
        .collect();
    Ok(FreeEnergySurface { pc1_edges, pc2_edges, free_energy, counts, explained_variance, components, mean, projections })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidueContribution {
    /// `[state][residue]`, each row sums to 1.
    pub matrix: Vec<Vec<f64>>,
    /// States with zero total soft weight; their rows are uniform.
    pub flagged_states: Vec<usize>,
}

/// `c_s[r] ∝ Σ_frames χ_s(frame) · attention(frame, r)`, normalised per state.
pub fn residue_contributions(attention: &[Vec<f64>], chi: &[Vec<f64>]) -> Result<ResidueContribution> {
    if attention.len() != chi.len() || attention.is_empty() {
        return Err(Error::Shape(format!("{} attention rows for {} assignment rows", attention.len(), chi.len())));
    }
    let n_res = attention[0].len();
    let m = chi[0].len();
    if n_res == 0 || m == 0 || attention.iter().any(|r| r.len() != n_res) || chi.iter().any(|r| r.len() != m) {
        return Err(Error::Shape("ragged attention or assignment rows".into()));
    }
    let mut matrix = vec![vec![0.0; n_res]; m];
    for (a, c) in attention.iter().zip(chi) {
        for s in 0..m {
            for r in 0..n_res {
                matrix[s][r] += c[s] * a[r];
            }
        }
    }
    let mut flagged_states = Vec::new();
    for (s, row) in matrix.iter_mut().enumerate() {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|v| *v /= total);
        } else {
            row.iter_mut().for_each(|v| *v = 1.0 / n_res as f64);
            flagged_states.push(s);
        }
    }
    Ok(ResidueContribution { matrix, flagged_states })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(labels: &[usize], m: usize) -> Mat {
        Mat::from_fn(labels.len(), m, |i, j| if labels[i] == j { 1.0 } else { 0.0 })
    }

    #[test]
    fn identity_chain_ck() {
        let a = one_hot(&[0; 20], 2);
        let b = one_hot(&[1; 20], 2);
        let res = ck_test(&[a, b], 2, 3).unwrap();
        for r in &res {
            assert!(r.max_abs_dev < 1e-6);
            assert!((r.estimated[0][0] - 1.0).abs() < 1e-6 && (r.estimated[1][1] - 1.0).abs() < 1e-6);
        }
        assert_eq!(res[0].predicted, res[0].estimated);
    }

    #[test]
    fn ck_needs_enough_frames() {
        let err = ck_test(&[one_hot(&[0, 1, 0, 1], 2)], 2, 2).unwrap_err();
        assert!(err.to_string().contains("at least 5 frames"), "{err}");
    }

    #[test]
    fn timescale_examples() {
        let t = Mat::from_row_slice(2, 2, &[0.9, 0.1, 0.1, 0.9]);
        let ts = implied_timescales(&t, 1, 1.0).unwrap();
        assert!((ts[0].modulus - 0.8).abs() < 1e-12);
        assert!((ts[0].timescale_ps.unwrap() - 4.4814201).abs() < 1e-6);
        let ts = implied_timescales(&Mat::identity(3, 3), 1, 1.0).unwrap();
        assert!(ts.iter().all(|t| t.timescale_ps.is_none()));
    }

    #[test]
    fn fes_cluster_ratio() {
        let mut z = vec![vec![0.0, 0.0]; 3];
        z.push(vec![4.0, 1.0]);
        let fes = free_energy_surface(&z, 8).unwrap();
        let occupied: Vec<f64> = fes.free_energy.iter().flatten().flatten().copied().collect();
        assert_eq!(occupied.len(), 2);
        let (lo, hi) = (occupied[0].min(occupied[1]), occupied[0].max(occupied[1]));
        assert_eq!(lo, 0.0);
        assert!((hi - 3f64.ln()).abs() < 1e-12);
        // All points on a line.
        assert!((fes.explained_variance[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fes_rejects_constant_embeddings() {
        assert!(free_energy_surface(&[vec![1.0, 1.0], vec![1.0, 1.0]], 4).is_err());
    }

    #[test]
    fn contributions() {
        let att = vec![vec![0.25; 4]; 3];
        let chi = vec![vec![0.2, 0.8], vec![1.0, 0.0], vec![0.5, 0.5]];
        let c = residue_contributions(&att, &chi).unwrap();
        assert!(c.matrix.iter().flatten().all(|&v| (v - 0.25).abs() < 1e-15));
        let att = vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]];
        let chi = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let c = residue_contributions(&att, &chi).unwrap();
        assert_eq!(c.matrix[0], vec![0.0, 1.0, 0.0]);
        assert_eq!(c.flagged_states, vec![2]);
    }
}
