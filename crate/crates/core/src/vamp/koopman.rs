//! Reversible, stationary transition matrices from a reweighting vector and a
//! symmetric kernel.
//!
//! `u = exp(ũ) / (χ̄τᵀ exp(ũ))` reweights frames by `wᵢ = χτ(xᵢ)ᵀu / n`, whose
//! reweighted average assignment is the target `π`. A symmetric positive kernel
//! `Ŝ = exp(W̃) + exp(W̃)ᵀ` is balanced by symmetric Sinkhorn scaling
//! `S = diag(d) Ŝ diag(d)` towards `S 1 = π`, and `K = diag(S 1)⁻¹ S`.
//! Normalising by the realised row sums of `S` makes `K` row-stochastic,
//! reversible and stationary with respect to `S 1 / 1ᵀS1` however far the
//! scaling got; the gap to the target `π` is the Sinkhorn residual.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Tape, Tensor, Var};
use crate::linalg::{to_rows, Mat};
use crate::{Error, Result};

pub const SINKHORN_ITERATIONS: usize = 50;
pub const SINKHORN_TOL: f64 = 1e-12;
pub const STARVED_WEIGHT: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedKoopman {
    pub u_raw: Vec<f64>,
    pub u: Vec<f64>,
    pub weights: Vec<f64>,
    /// Reweighted average assignment, the Sinkhorn target.
    pub target_pi: Vec<f64>,
    /// Stationary distribution of `k`.
    pub pi: Vec<f64>,
    pub w_raw: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub sinkhorn_iterations: usize,
    pub sinkhorn_residual: f64,
}

impl ConstrainedKoopman {
    pub fn k_matrix(&self) -> Mat {
        let m = self.k.len();
        Mat::from_fn(m, m, |i, j| self.k[i][j])
    }

    /// `max |π_i K_ij − π_j K_ji|`.
    pub fn detailed_balance_residual(&self) -> f64 {
        let m = self.k.len();
        let mut worst: f64 = 0.0;
        for i in 0..m {
            for j in 0..m {
                worst = worst.max((self.pi[i] * self.k[i][j] - self.pi[j] * self.k[j][i]).abs());
            }
        }
        worst
    }

    /// `max |πᵀK − πᵀ|`.
    pub fn stationarity_residual(&self) -> f64 {
        let m = self.k.len();
        (0..m)
            .map(|j| ((0..m).map(|i| self.pi[i] * self.k[i][j]).sum::<f64>() - self.pi[j]).abs())
            .fold(0.0, f64::max)
    }

    pub fn row_sum_residual(&self) -> f64 {
        self.k.iter().map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// Tape handles of the constrained construction.
#[derive(Debug, Clone, Copy)]
pub struct KoopmanVars {
    /// `[m, 1]`
    pub u: Var,
    /// `[n, 1]`, sums to 1.
    pub weights: Var,
    /// `[1, m]`
    pub target_pi: Var,
    /// `[m, 1]`, stationary distribution of `k`.
    pub pi: Var,
    pub s: Var,
    pub k: Var,
    pub sinkhorn_iterations: usize,
    pub sinkhorn_residual: f64,
}

/// Differentiable construction; `u_raw` is `[m, 1]`, `w_raw` `[m, m]`, `xt` `[n, m]`.
/// The Sinkhorn loop is unrolled on the tape.
pub fn constrained_k_on(tape: &mut Tape, u_raw: Var, w_raw: Var, xt: Var) -> Result<KoopmanVars> {
    let (n, m) = tape.value(xt).dims()?;
    if n == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if tape.value(u_raw).dims()? != (m, 1) || tape.value(w_raw).dims()? != (m, m) {
        return Err(Error::Shape(format!(
            "ũ {:?} and W̃ {:?} for {m} states",
            tape.value(u_raw).shape(),
            tape.value(w_raw).shape()
        )));
    }
    let eu = tape.exp(u_raw)?;
    let mean = tape.mean(xt, Some(Axis::Rows))?;
    let denom = tape.matmul(mean, eu)?;
    let u = tape.div(eu, denom)?;
    let w = tape.matmul(xt, u)?;
    let w = tape.scale(w, 1.0 / n as f64)?;
    let wt = tape.transpose(w)?;
    let target = tape.matmul(wt, xt)?;
    if let Some((state, &weight)) =
        tape.value(target).data().iter().enumerate().find(|(_, &p)| !(p >= STARVED_WEIGHT))
    {
        return Err(Error::StateStarved { state, weight });
    }
    let target_col = tape.transpose(target)?;

    let ew = tape.exp(w_raw)?;
    let ewt = tape.transpose(ew)?;
    let s_hat = tape.add(ew, ewt)?;

    // d <- sqrt(d * π / (Ŝ d)), starting from d = 1.
    let mut d = tape.constant(Tensor::full(&[m, 1], 1.0));
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while iterations < SINKHORN_ITERATIONS {
        let sd = tape.matmul(s_hat, d)?;
        residual = {
            let (dv, sv, pv) = (tape.value(d).data(), tape.value(sd).data(), tape.value(target_col).data());
            (0..m).map(|i| (dv[i] * sv[i] - pv[i]).abs()).fold(0.0, f64::max)
        };
        if residual <= SINKHORN_TOL {
            break;
        }
        let num = tape.mul(d, target_col)?;
        let ratio = tape.div(num, sd)?;
        d = tape.sqrt(ratio)?;
        iterations += 1;
    }
    if iterations == SINKHORN_ITERATIONS {
        let sd = tape.matmul(s_hat, d)?;
        let (dv, sv, pv) = (tape.value(d).data(), tape.value(sd).data(), tape.value(target_col).data());
        residual = (0..m).map(|i| (dv[i] * sv[i] - pv[i]).abs()).fold(0.0, f64::max);
    }

    let left = tape.scale_rows(s_hat, d)?;
    let left_t = tape.transpose(left)?;
    let scaled = tape.scale_rows(left_t, d)?;
    let scaled_t = tape.transpose(scaled)?;
    let s = tape.add(scaled, scaled_t)?;
    let s = tape.scale(s, 0.5)?;

    let rows = tape.sum(s, Some(Axis::Cols))?;
    let ones = tape.constant(Tensor::full(&[m, 1], 1.0));
    let inv_rows = tape.div(ones, rows)?;
    let k = tape.scale_rows(s, inv_rows)?;
    let total = tape.sum(rows, None)?;
    let pi = tape.div(rows, total)?;
    Ok(KoopmanVars {
        u,
        weights: w,
        target_pi: target,
        pi,
        s,
        k,
        sinkhorn_iterations: iterations,
        sinkhorn_residual: residual,
    })
}

/// Value-level construction from raw parameters and a batch of lagged assignments.
pub fn build_constrained_k(u_raw: &[f64], w_raw: &Mat, xt: &Mat) -> Result<ConstrainedKoopman> {
    let (n, m) = xt.shape();
    if n == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if u_raw.len() != m || w_raw.shape() != (m, m) {
        return Err(Error::Shape(format!("ũ of length {} and W̃ {:?} for {m} states", u_raw.len(), w_raw.shape())));
    }
    let mut tape = Tape::new();
    let uv = tape.constant(Tensor::matrix(m, 1, u_raw.to_vec())?);
    let wv = tape.constant(super::mat_to_tensor(w_raw));
    let xv = tape.constant(super::mat_to_tensor(xt));
    let kv = constrained_k_on(&mut tape, uv, wv, xv)?;
    let rows = |v: Var| -> Result<Vec<Vec<f64>>> { Ok(to_rows(&super::tensor_to_mat(tape.value(v))?)) };
    Ok(ConstrainedKoopman {
        u_raw: u_raw.to_vec(),
        u: tape.value(kv.u).data().to_vec(),
        weights: tape.value(kv.weights).data().to_vec(),
        target_pi: tape.value(kv.target_pi).data().to_vec(),
        pi: tape.value(kv.pi).data().to_vec(),
        w_raw: to_rows(w_raw),
        s: rows(kv.s)?,
        k: rows(kv.k)?,
        sinkhorn_iterations: kv.sinkhorn_iterations,
        sinkhorn_residual: kv.sinkhorn_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_reweighting() {
        let xt = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let c = build_constrained_k(&[0.0, 0.0], &Mat::zeros(2, 2), &xt).unwrap();
        assert_eq!(c.u, vec![1.0, 1.0]);
        assert_eq!(c.weights, vec![0.5, 0.5]);
        assert_eq!(c.target_pi, vec![0.5, 0.5]);
    }

    #[test]
    fn uniform_kernel_by_hand() {
        // exp(0) + exp(0) = 2 everywhere; the balanced kernel is 0.25 * ones.
        let xt = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let c = build_constrained_k(&[0.0, 0.0], &Mat::zeros(2, 2), &xt).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((c.s[i][j] - 0.25).abs() < 1e-12);
                assert!((c.k[i][j] - 0.5).abs() < 1e-12);
            }
        }
        assert_eq!(c.s[0][1], c.s[1][0]);
    }

    #[test]
    fn asymmetric_target() {
        // Three frames in state 0, one in state 1: π = [0.75, 0.25].
        let xt = Mat::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let c = build_constrained_k(&[0.0, 0.0], &Mat::zeros(2, 2), &xt).unwrap();
        assert!((c.target_pi[0] - 0.75).abs() < 1e-15);
        assert!((c.pi[0] - 0.75).abs() < 1e-10, "{:?}", c.pi);
        assert!(c.detailed_balance_residual() < 1e-10);
        assert!(c.stationarity_residual() < 1e-10);
        assert!(c.row_sum_residual() < 1e-12);
    }

    #[test]
    fn unused_state_is_starved() {
        let xt = Mat::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        match build_constrained_k(&[0.0, 0.0], &Mat::zeros(2, 2), &xt) {
            Err(Error::StateStarved { state: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
    }
}
