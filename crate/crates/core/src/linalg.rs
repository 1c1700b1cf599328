//! Small dense helpers on top of `nalgebra` shared by the analysis code.

use nalgebra::DMatrix;

use crate::{Error, Result};

pub type Mat = DMatrix<f64>;

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_sym_eigenvalue(m: &Mat) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(m: &Mat) -> Result<Mat> {
    if !m.is_square() {
        return Err(Error::Shape(format!("inverse of non-square {}x{}", m.nrows(), m.ncols())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix to invert".into()));
    }
    match m.clone().cholesky() {
        Some(c) => Ok(c.inverse()),
        None => Err(Error::NotPositiveDefinite { min_eigenvalue: min_sym_eigenvalue(m) }),
    }
}

/// `m^n` by repeated squaring; `n = 1` returns an exact copy.
pub fn matrix_power(m: &Mat, n: u32) -> Mat {
    if n == 1 {
        return m.clone();
    }
    let mut result = Mat::identity(m.nrows(), m.ncols());
    let mut base = m.clone();
    let mut e = n;
    while e > 0 {
        if e & 1 == 1 {
            result = &result * &base;
        }
        e >>= 1;
        if e > 0 {
            base = &base * &base;
        }
    }
    result
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let n = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(Error::Shape("ragged rows".into()));
    }
    Ok(Mat::from_fn(n, c, |i, j| rows[i][j]))
}
