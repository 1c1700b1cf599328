//! Weighted Kabsch superposition.

use nalgebra::{Matrix3, Vector3};

use crate::trajectory::Vec3;
use crate::{Error, Result};

/// Rigid transform mapping the mobile set onto the reference:
/// `aligned = rotation * mobile + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Superposition {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub rmsd: f64,
}

impl Superposition {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (self.rotation * Vector3::from(*p) + self.translation).into()
    }
}

fn weighted_center(points: &[Vec3], weights: &[f64], total: f64) -> Vector3<f64> {
    points
        .iter()
        .zip(weights)
        .map(|(p, w)| Vector3::from(*p) * *w)
        .sum::<Vector3<f64>>()
        / total
}

fn check_rank(points: &[Vec3], weights: &[f64], center: &Vector3<f64>, label: &str) -> Result<()> {
    let mut scatter = Matrix3::zeros();
    for (p, w) in points.iter().zip(weights) {
        let d = Vector3::from(*p) - center;
        scatter += d * d.transpose() * *w;
    }
    let eig = scatter.symmetric_eigenvalues();
    let largest = eig.iter().copied().fold(0.0, f64::max);
    let rank = eig.iter().filter(|&&l| l > 1e-10 * largest.max(1e-300)).count();
    let rank = if largest <= 1e-20 { 0 } else { rank };
    if rank < 2 {
        return Err(Error::Degenerate(format!(
            "{label} point set has rank {rank}, superposition needs rank 2 (points are {})",
            if rank == 0 { "coincident" } else { "collinear" }
        )));
    }
    Ok(())
}

/// Weighted least-squares rigid superposition of `mobile` onto `reference`.
/// The returned rotation is always proper.
pub fn kabsch_align(mobile: &[Vec3], reference: &[Vec3], weights: &[f64]) -> Result<Superposition> {
    let n = mobile.len();
    if reference.len() != n || weights.len() != n {
        return Err(Error::Shape(format!(
            "{n} mobile points, {} reference points, {} weights",
            reference.len(),
            weights.len()
        )));
    }
    if n < 3 {
        return Err(Error::InvalidInput(format!("superposition needs at least 3 points, got {n}")));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::InvalidInput("weights must be non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidInput("weights sum to zero".into()));
    }

    let cm = weighted_center(mobile, weights, total);
    let cr = weighted_center(reference, weights, total);
    check_rank(mobile, weights, &cm, "mobile")?;
    check_rank(reference, weights, &cr, "reference")?;

    // Cross-covariance H = sum w (m - cm)(r - cr)^T; R = V diag(1,1,d) U^T.
    let mut h = Matrix3::zeros();
    for ((m, r), w) in mobile.iter().zip(reference).zip(weights) {
        h += (Vector3::from(*m) - cm) * (Vector3::from(*r) - cr).transpose() * *w;
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd computes U");
    let v_t = svd.v_t.expect("svd computes V^T");
    let d = (v_t.transpose() * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, if d < 0.0 { -1.0 } else { 1.0 }));
    let rotation = v_t.transpose() * correction * u.transpose();
    let translation = cr - rotation * cm;

    let sq: f64 = mobile
        .iter()
        .zip(reference)
        .zip(weights)
        .map(|((m, r), w)| w * (rotation * Vector3::from(*m) + translation - Vector3::from(*r)).norm_squared())
        .sum();
    Ok(Superposition { rotation, translation, rmsd: (sq / total).sqrt() })
}
