//! Shrake-Rupley solvent-accessible surface area.
//!
//! Each heavy atom gets `n_sphere_points` test points on a sphere of radius
//! `vdw + probe`; a point counts as accessible when it lies outside every other
//! heavy atom's expanded sphere. Hydrogens neither receive area nor occlude.
//!
//! Test points are laid out on a golden-angle (Fibonacci) spiral expressed in
//! the molecule's principal-axis frame, so the estimate follows the molecule
//! under rigid motion instead of being tied to the lab axes.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::trajectory::{Topology, Vec3};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SasaParams {
    pub probe_radius: f64,
    pub n_sphere_points: usize,
}

impl Default for SasaParams {
    fn default() -> Self {
        Self { probe_radius: 1.4, n_sphere_points: 960 }
    }
}

impl SasaParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.probe_radius > 0.0) {
            return Err(Error::InvalidInput(format!(
                "probe radius must be positive, got {}",
                self.probe_radius
            )));
        }
        if self.n_sphere_points < 32 {
            return Err(Error::InvalidInput(format!(
                "need at least 32 sphere points, got {}",
                self.n_sphere_points
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SasaResult {
    /// Total area in Å².
    pub total: f64,
    /// Per-atom area in Å²; hydrogens are always zero.
    pub per_atom: Vec<f64>,
}

/// Unit vectors on a golden-angle spiral.
pub fn fibonacci_sphere(n: usize) -> Vec<[f64; 3]> {
    let golden_angle = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden_angle * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

/// Rotation whose columns are the principal axes of the heavy-atom cloud,
/// ordered by decreasing spread, signs fixed by third moments, proper.
/// Falls back to the identity when the cloud has no usable axes.
pub fn principal_frame(coords: &[Vec3], topology: &Topology) -> Matrix3<f64> {
    let pts: Vec<Vector3<f64>> = topology
        .atoms()
        .iter()
        .zip(coords)
        .filter(|(a, _)| a.element.is_heavy())
        .map(|(_, p)| Vector3::from(*p))
        .collect();
    if pts.len() < 2 {
        return Matrix3::identity();
    }
    let center = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let mut scatter = Matrix3::zeros();
    for p in &pts {
        let d = p - center;
        scatter += d * d.transpose();
    }
    let eig = scatter.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes: Vec<Vector3<f64>> = order.iter().map(|&k| eig.eigenvectors.column(k).into()).collect();
    for axis in axes.iter_mut().take(2) {
        let skew: f64 = pts.iter().map(|p| (p - center).dot(axis).powi(3)).sum();
        let first_moment_sign: f64 = pts
            .iter()
            .map(|p| (p - center).dot(axis))
            .fold(0.0, |acc, x| if acc == 0.0 && x.abs() > 1e-12 { x } else { acc });
        let sign = if skew.abs() > 1e-9 { skew } else { first_moment_sign };
        if sign < 0.0 {
            *axis = -*axis;
        }
    }
    let third = axes[0].cross(&axes[1]);
    Matrix3::from_columns(&[axes[0], axes[1], third])
}

/// SASA with test points oriented by [`principal_frame`].
pub fn sasa(coords: &[Vec3], topology: &Topology, params: &SasaParams) -> Result<SasaResult> {
    let frame = principal_frame(coords, topology);
    sasa_in_frame(coords, topology, params, &frame)
}

/// SASA with test points rotated by an explicit `frame`.
pub fn sasa_in_frame(
    coords: &[Vec3],
    topology: &Topology,
    params: &SasaParams,
    frame: &Matrix3<f64>,
) -> Result<SasaResult> {
    params.validate()?;
    if coords.len() != topology.n_atoms() {
        return Err(Error::Consistency(format!(
            "{} coordinates for {} atoms",
            coords.len(),
            topology.n_atoms()
        )));
    }
    let unit: Vec<Vector3<f64>> = fibonacci_sphere(params.n_sphere_points)
        .into_iter()
        .map(|p| frame * Vector3::from(p))
        .collect();

    let heavy: Vec<usize> = (0..topology.n_atoms())
        .filter(|&i| topology.atoms()[i].element.is_heavy())
        .collect();
    let radius: Vec<f64> = heavy
        .iter()
        .map(|&i| topology.atoms()[i].vdw_radius + params.probe_radius)
        .collect();
    let center: Vec<Vector3<f64>> = heavy.iter().map(|&i| Vector3::from(coords[i])).collect();

    let mut per_atom = vec![0.0; topology.n_atoms()];
    let mut neighbors = Vec::new();
    for a in 0..heavy.len() {
        neighbors.clear();
        for b in 0..heavy.len() {
            if b != a && (center[a] - center[b]).norm_squared() < (radius[a] + radius[b]).powi(2) {
                neighbors.push(b);
            }
        }
        let mut accessible = 0usize;
        for u in &unit {
            let point = center[a] + u * radius[a];
            let buried = neighbors
                .iter()
                .any(|&b| (point - center[b]).norm_squared() < radius[b] * radius[b]);
            if !buried {
                accessible += 1;
            }
        }
        let sphere_area = 4.0 * std::f64::consts::PI * radius[a] * radius[a];
        per_atom[heavy[a]] = sphere_area * accessible as f64 / unit.len() as f64;
    }
    let total = per_atom.iter().sum();
    Ok(SasaResult { total, per_atom })
}

/// Per-residue sums of per-atom SASA.
pub fn res_sasa(coords: &[Vec3], topology: &Topology, params: &SasaParams) -> Result<Vec<f64>> {
    let result = sasa(coords, topology, params)?;
    Ok(per_residue(&result, topology))
}

pub fn per_residue(result: &SasaResult, topology: &Topology) -> Vec<f64> {
    topology
        .residues()
        .iter()
        .map(|r| result.per_atom[r.atoms.clone()].iter().sum())
        .collect()
}
