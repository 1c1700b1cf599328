//! Variational scores for state assignments and the kinetic analyses built on them.
//!
//! Covariances are uncentred: `C00 = X0ᵀ W X0`, `C0τ = X0ᵀ W Xτ`, `Cττ = Xτᵀ W Xτ`
//! with `W = diag(w)`, uniform `1/n` unless reweighted. Because the rows of `X`
//! are probability vectors, the constant function lies in their span and the
//! VAMP-2 score of `m` states is at most `m`.

mod analysis;
mod koopman;

pub use analysis::{
    ck_test, free_energy_surface, implied_timescales, koopman_estimate, koopman_estimate_pairs, residue_contributions, CkTestResult,
    FreeEnergySurface, ResidueContribution, Timescale, DEFAULT_FES_BINS,
};
pub use koopman::{build_constrained_k, constrained_k_on, ConstrainedKoopman, KoopmanVars, SINKHORN_ITERATIONS, SINKHORN_TOL, STARVED_WEIGHT};

use crate::autodiff::{Axis, Tape, Tensor, Var};
use crate::linalg::{spd_inverse, Mat};
use crate::{Error, Result};

/// Relative ridge: `eps = REL_EPS * trace / m`.
pub const REL_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSet {
    pub c00: Mat,
    pub c0t: Mat,
    pub ctt: Mat,
    pub lag: usize,
    pub eps: f64,
    pub n_pairs: usize,
}

/// The ridge shared by both instantaneous covariances.
pub fn regularization(c00_trace: f64, ctt_trace: f64, m: usize) -> f64 {
    REL_EPS * c00_trace.max(ctt_trace) / m as f64
}

fn check_pair(x0: &Mat, xt: &Mat) -> Result<()> {
    if x0.shape() != xt.shape() {
        return Err(Error::Shape(format!("X0 is {:?}, Xτ is {:?}", x0.shape(), xt.shape())));
    }
    let (n, m) = x0.shape();
    if n < m {
        return Err(Error::InvalidInput(format!("{n} pairs for {m} states; need at least {m}")));
    }
    if x0.iter().chain(xt.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("assignment matrix".into()));
    }
    Ok(())
}

fn weighted_gram(a: &Mat, b: &Mat, w: &[f64]) -> Mat {
    let m = a.ncols();
    let mut c = Mat::zeros(m, m);
    for i in 0..a.nrows() {
        for p in 0..m {
            let ap = w[i] * a[(i, p)];
            if ap == 0.0 {
                continue;
            }
            for q in 0..m {
                c[(p, q)] += ap * b[(i, q)];
            }
        }
    }
    c
}

/// Time-lagged covariances of paired assignment rows.
pub fn covariances(x0: &Mat, xt: &Mat, weights: Option<&[f64]>, lag: usize) -> Result<CovarianceSet> {
    check_pair(x0, xt)?;
    let (n, m) = x0.shape();
    let uniform;
    let w = match weights {
        Some(w) => {
            if w.len() != n {
                return Err(Error::Shape(format!("{} weights for {n} pairs", w.len())));
            }
            if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidInput("weights must be finite and non-negative".into()));
            }
            w
        }
        None => {
            uniform = vec![1.0 / n as f64; n];
            &uniform
        }
    };
    let c00 = weighted_gram(x0, x0, w);
    let c0t = weighted_gram(x0, xt, w);
    let ctt = weighted_gram(xt, xt, w);
    let eps = regularization(c00.trace(), ctt.trace(), m);
    Ok(CovarianceSet { c00, c0t, ctt, lag, eps, n_pairs: n })
}

impl CovarianceSet {
    pub fn m(&self) -> usize {
        self.c00.nrows()
    }

    fn ridge(&self, c: &Mat) -> Mat {
        c + Mat::identity(self.m(), self.m()) * self.eps
    }

    /// `(C00 + eps I)^-1` and `(Cττ + eps I)^-1`.
    pub fn inverses(&self) -> Result<(Mat, Mat)> {
        Ok((spd_inverse(&self.ridge(&self.c00))?, spd_inverse(&self.ridge(&self.ctt))?))
    }

    /// `A* = (C00 + eps I)^-1 C0τ (Cττ + eps I)^-1`, the maximiser of [`vamp_e_score`].
    pub fn koopman_maximizer(&self) -> Result<Mat> {
        let (i0, it) = self.inverses()?;
        Ok(i0 * &self.c0t * it)
    }
}

/// `tr[(C00 + eps I)^-1 C0τ (Cττ + eps I)^-1 C0τᵀ]`.
pub fn vamp2_score(cov: &CovarianceSet) -> Result<f64> {
    let (i0, it) = cov.inverses()?;
    Ok((i0 * &cov.c0t * it * cov.c0t.transpose()).trace())
}

/// `tr[2 Aᵀ C0τ - Aᵀ (C00 + eps I) A (Cττ + eps I)]`. With the ridge in the
/// quadratic term the maximiser [`CovarianceSet::koopman_maximizer`] scores
/// exactly [`vamp2_score`].
pub fn vamp_e_score(cov: &CovarianceSet, a: &Mat) -> Result<f64> {
    if a.shape() != cov.c00.shape() {
        return Err(Error::Shape(format!("A is {:?}, covariances are {:?}", a.shape(), cov.c00.shape())));
    }
    let at = a.transpose();
    Ok((&at * &cov.c0t * 2.0 - &at * cov.ridge(&cov.c00) * a * cov.ridge(&cov.ctt)).trace())
}

/// Rows of a `[n, m]` tensor as a matrix.
pub fn tensor_to_mat(t: &Tensor) -> Result<Mat> {
    let (r, c) = t.dims()?;
    Ok(Mat::from_row_slice(r, c, t.data()))
}

pub fn mat_to_tensor(m: &Mat) -> Tensor {
    Tensor::matrix(m.nrows(), m.ncols(), m.transpose().as_slice().to_vec()).expect("matching shape")
}

/// Covariance handles on a tape.
#[derive(Debug, Clone, Copy)]
pub struct CovVars {
    pub c00: Var,
    pub c0t: Var,
    pub ctt: Var,
    pub eps: f64,
    /// `[1, 1]` ridge on the tape, differentiable through the selected trace.
    pub eps_var: Var,
}

fn sym(tape: &mut Tape, c: Var) -> Result<Var> {
    let t = tape.transpose(c)?;
    let s = tape.add(c, t)?;
    tape.scale(s, 0.5)
}

/// Differentiable covariances. `weights` is an `[n, 1]` column; `None` means `1/n`.
pub fn covariances_on(tape: &mut Tape, x0: Var, xt: Var, weights: Option<Var>) -> Result<CovVars> {
    let (n, m) = tape.value(x0).dims()?;
    if tape.value(xt).dims()? != (n, m) {
        return Err(Error::Shape(format!(
            "X0 is {:?}, Xτ is {:?}",
            tape.value(x0).shape(),
            tape.value(xt).shape()
        )));
    }
    if n < m {
        return Err(Error::InvalidInput(format!("{n} pairs for {m} states; need at least {m}")));
    }
    let (w0, wt) = match weights {
        Some(w) => (tape.scale_rows(x0, w)?, tape.scale_rows(xt, w)?),
        None => (tape.scale(x0, 1.0 / n as f64)?, tape.scale(xt, 1.0 / n as f64)?),
    };
    let w0t = tape.transpose(w0)?;
    let wtt = tape.transpose(wt)?;
    let c00 = tape.matmul(w0t, x0)?;
    let c00 = sym(tape, c00)?;
    let c0t = tape.matmul(w0t, xt)?;
    let ctt = tape.matmul(wtt, xt)?;
    let ctt = sym(tape, ctt)?;
    let tr00 = tape.trace(c00)?;
    let trtt = tape.trace(ctt)?;
    let eps = regularization(tape.value(tr00).item(), tape.value(trtt).item(), m);
    let larger = if tape.value(tr00).item() >= tape.value(trtt).item() { tr00 } else { trtt };
    let eps_var = tape.scale(larger, REL_EPS / m as f64)?;
    Ok(CovVars { c00, c0t, ctt, eps, eps_var })
}

fn ridged(tape: &mut Tape, c: Var, eps: Var) -> Result<Var> {
    let m = tape.value(c).rows();
    let eye = tape.constant(Tensor::identity(m));
    let ridge = tape.mul(eye, eps)?;
    tape.add(c, ridge)
}

fn ridge_inverse(tape: &mut Tape, c: Var, eps: Var) -> Result<Var> {
    let r = ridged(tape, c, eps)?;
    tape.inverse(r)
}

/// `(Cττ + eps I)^-1` on the tape.
pub fn ctt_inverse_on(tape: &mut Tape, cov: &CovVars) -> Result<Var> {
    ridge_inverse(tape, cov.ctt, cov.eps_var)
}

pub fn vamp2_on(tape: &mut Tape, cov: &CovVars) -> Result<Var> {
    let i0 = ridge_inverse(tape, cov.c00, cov.eps_var)?;
    let it = ridge_inverse(tape, cov.ctt, cov.eps_var)?;
    let a = tape.matmul(i0, cov.c0t)?;
    let a = tape.matmul(a, it)?;
    let ct = tape.transpose(cov.c0t)?;
    let a = tape.matmul(a, ct)?;
    tape.trace(a)
}

pub fn vamp_e_on(tape: &mut Tape, cov: &CovVars, a: Var) -> Result<Var> {
    let at = tape.transpose(a)?;
    let first = tape.matmul(at, cov.c0t)?;
    let first = tape.scale(first, 2.0)?;
    let c00 = ridged(tape, cov.c00, cov.eps_var)?;
    let ctt = ridged(tape, cov.ctt, cov.eps_var)?;
    let second = tape.matmul(at, c00)?;
    let second = tape.matmul(second, a)?;
    let second = tape.matmul(second, ctt)?;
    let diff = tape.sub(first, second)?;
    tape.trace(diff)
}

/// Column means of `x` as a `[1, m]` row (the average assignment).
pub fn mean_row(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.mean(x, Some(Axis::Rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(states: &[usize], m: usize) -> Mat {
        let mut x = Mat::zeros(states.len(), m);
        for (i, &s) in states.iter().enumerate() {
            x[(i, s)] = 1.0;
        }
        x
    }

    #[test]
    fn covariance_examples() {
        let c = covariances(&one_hot(&[0, 0], 2), &one_hot(&[0, 1], 2), None, 1).unwrap();
        assert_eq!(c.c00, Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        assert_eq!(c.c0t, Mat::from_row_slice(2, 2, &[0.5, 0.5, 0.0, 0.0]));

        let x = one_hot(&[0, 1], 2);
        let c = covariances(&x, &x, None, 1).unwrap();
        let half = Mat::from_diagonal_element(2, 2, 0.5);
        assert_eq!((c.c00.clone(), c.c0t.clone(), c.ctt.clone()), (half.clone(), half.clone(), half));

        let soft = Mat::from_element(3, 2, 0.5);
        let c = covariances(&soft, &soft, None, 1).unwrap();
        assert!(c.c0t.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn too_few_pairs() {
        let x = one_hot(&[0], 2);
        assert!(covariances(&x, &x, None, 1).is_err());
    }

    fn two_state_chain() -> CovarianceSet {
        CovarianceSet {
            c00: Mat::from_diagonal_element(2, 2, 0.5),
            c0t: Mat::from_row_slice(2, 2, &[0.45, 0.05, 0.05, 0.45]),
            ctt: Mat::from_diagonal_element(2, 2, 0.5),
            lag: 1,
            eps: 1e-14,
            n_pairs: 0,
        }
    }

    #[test]
    fn two_state_scores() {
        let c = two_state_chain();
        assert!((vamp2_score(&c).unwrap() - 1.64).abs() < 1e-10);
        let a = c.koopman_maximizer().unwrap();
        assert!((vamp_e_score(&c, &a).unwrap() - 1.64).abs() < 1e-10);
        assert_eq!(vamp_e_score(&c, &Mat::zeros(2, 2)).unwrap(), 0.0);
    }

    #[test]
    fn persistence_reaches_the_ceiling() {
        let x = one_hot(&[0, 1, 0, 1], 2);
        let c = covariances(&x, &x, None, 1).unwrap();
        assert!((vamp2_score(&c).unwrap() - 2.0).abs() < 1e-5);
        let x = one_hot(&[0, 0, 0], 2);
        let c = covariances(&x, &x, None, 1).unwrap();
        assert!((vamp2_score(&c).unwrap() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn tape_route_matches_value_route() {
        let x0 = Mat::from_row_slice(4, 2, &[0.9, 0.1, 0.2, 0.8, 0.6, 0.4, 0.3, 0.7]);
        let xt = Mat::from_row_slice(4, 2, &[0.8, 0.2, 0.1, 0.9, 0.7, 0.3, 0.4, 0.6]);
        let c = covariances(&x0, &xt, None, 1).unwrap();
        let mut tape = Tape::new();
        let a = tape.leaf(mat_to_tensor(&x0));
        let b = tape.leaf(mat_to_tensor(&xt));
        let cv = covariances_on(&mut tape, a, b, None).unwrap();
        assert!((cv.eps - c.eps).abs() < 1e-18);
        let s = vamp2_on(&mut tape, &cv).unwrap();
        assert!((tape.value(s).item() - vamp2_score(&c).unwrap()).abs() < 1e-10);
    }
}
