//! Per-frame residue graphs.
//!
//! Every residue receives directed edges from its `k` nearest residues, where
//! residue distance is the minimum heavy-atom pair distance. Edge distances are
//! expanded on a uniform grid of Gaussians.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::trajectory::{Topology, Vec3};
use crate::{Error, Result};

pub const DEFAULT_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbfConfig {
    pub n_centers: usize,
    pub d_max: f64,
    pub sigma: f64,
}

impl Default for RbfConfig {
    fn default() -> Self {
        let n_centers = 16;
        let d_max = 10.0;
        Self { n_centers, d_max, sigma: d_max / (n_centers - 1) as f64 }
    }
}

impl RbfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_centers < 2 || !(self.d_max > 0.0) || !(self.sigma > 0.0) {
            return Err(Error::InvalidInput(format!("invalid RBF config {self:?}")));
        }
        Ok(())
    }

    pub fn center(&self, k: usize) -> f64 {
        k as f64 * self.d_max / (self.n_centers - 1) as f64
    }
}

/// `exp(-(d - mu_k)^2 / (2 sigma^2))` for each center `mu_k`.
pub fn rbf_expand(d: f64, config: &RbfConfig) -> Vec<f64> {
    let mut out = vec![0.0; config.n_centers];
    rbf_expand_into(d, config, &mut out);
    out
}

pub fn rbf_expand_into(d: f64, config: &RbfConfig, out: &mut [f64]) {
    let inv = 1.0 / (2.0 * config.sigma * config.sigma);
    for (k, o) in out.iter_mut().enumerate() {
        let x = d - config.center(k);
        *o = (-x * x * inv).exp();
    }
}

/// Minimum distance over all pairs drawn from two heavy-atom sets.
pub fn min_heavy_distance(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("residue without heavy atoms".into()));
    }
    let mut best = f64::INFINITY;
    for p in a {
        for q in b {
            let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
            best = best.min(d2);
        }
    }
    Ok(best.sqrt())
}

/// Neighbour lists without edge features.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    pub n_nodes: usize,
    pub k: usize,
    /// Row-major `n_nodes x k`.
    pub neighbors: Vec<usize>,
    /// Row-major `n_nodes x k`, ascending within each row.
    pub distances: Vec<f64>,
}

impl KnnGraph {
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        (&self.neighbors[i * self.k..(i + 1) * self.k], &self.distances[i * self.k..(i + 1) * self.k])
    }
}

/// Full residue-residue minimum heavy-atom distance matrix (row-major).
pub fn residue_distance_matrix(coords: &[Vec3], topology: &Topology) -> Result<Vec<f64>> {
    let n = topology.n_residues();
    let heavy: Vec<Vec<Vec3>> = (0..n)
        .map(|r| topology.heavy_atoms(r).map(|i| coords[i]).collect())
        .collect();
    if let Some(r) = heavy.iter().position(Vec::is_empty) {
        return Err(Error::InvalidInput(format!("residue {r} has no heavy atoms")));
    }
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = min_heavy_distance(&heavy[i], &heavy[j])?;
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    Ok(d)
}

/// Directed k-nearest-neighbour graph; `k` is clipped to `n_residues - 1` and
/// ties go to the lower residue index.
pub fn knn_graph(coords: &[Vec3], topology: &Topology, k: usize) -> Result<KnnGraph> {
    let n = topology.n_residues();
    if n < 2 {
        return Err(Error::InvalidInput(format!("k-NN graph needs at least 2 residues, got {n}")));
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    if coords.len() != topology.n_atoms() {
        return Err(Error::Consistency(format!(
            "{} coordinates for {} atoms",
            coords.len(),
            topology.n_atoms()
        )));
    }
    let k = k.min(n - 1);
    let dm = residue_distance_matrix(coords, topology)?;
    let mut neighbors = Vec::with_capacity(n * k);
    let mut distances = Vec::with_capacity(n * k);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        order.sort_by(|&a, &b| dm[i * n + a].total_cmp(&dm[i * n + b]).then(a.cmp(&b)));
        for &j in &order[..k] {
            neighbors.push(j);
            distances.push(dm[i * n + j]);
        }
    }
    Ok(KnnGraph { n_nodes: n, k, neighbors, distances })
}

/// The attributed residue graph consumed by the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidueGraph {
    pub knn: KnnGraph,
    pub rbf: RbfConfig,
    /// Row-major `n_nodes x k x n_centers`.
    pub edge_features: Vec<f64>,
}

impl ResidueGraph {
    pub fn n_nodes(&self) -> usize {
        self.knn.n_nodes
    }

    pub fn k(&self) -> usize {
        self.knn.k
    }

    pub fn n_edges(&self) -> usize {
        self.knn.n_nodes * self.knn.k
    }
}

pub fn build_graph(coords: &[Vec3], topology: &Topology, k: usize, rbf: &RbfConfig) -> Result<ResidueGraph> {
    rbf.validate()?;
    let knn = knn_graph(coords, topology, k)?;
    let mut edge_features = vec![0.0; knn.distances.len() * rbf.n_centers];
    for (e, &d) in knn.distances.iter().enumerate() {
        rbf_expand_into(d, rbf, &mut edge_features[e * rbf.n_centers..(e + 1) * rbf.n_centers]);
    }
    Ok(ResidueGraph { knn, rbf: *rbf, edge_features })
}

/// Debug dump with rows `frame,i,rank,j,d_ij`.
pub fn graph_csv(graphs: &[KnnGraph]) -> String {
    let mut out = String::from("frame,i,rank,j,d_ij\n");
    for (f, g) in graphs.iter().enumerate() {
        for i in 0..g.n_nodes {
            let (nb, d) = g.row(i);
            for (rank, (j, dij)) in nb.iter().zip(d).enumerate() {
                writeln!(out, "{f},{i},{rank},{j},{dij:?}").expect("string write");
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::Element;

    fn carbons(n: usize) -> Topology {
        let residues: Vec<(&str, Vec<(&str, Element)>)> =
            (0..n).map(|_| ("GLY", vec![("CA", Element::C)])).collect();
        Topology::from_residues(&residues).unwrap()
    }

    #[test]
    fn min_distance_examples() {
        assert_eq!(min_heavy_distance(&[[0.0; 3]], &[[3.0, 0.0, 0.0]]).unwrap(), 3.0);
        assert_eq!(
            min_heavy_distance(&[[0.0; 3], [5.0, 0.0, 0.0]], &[[1.0, 0.0, 0.0]]).unwrap(),
            1.0
        );
        assert_eq!(min_heavy_distance(&[[1.0; 3]], &[[1.0; 3]]).unwrap(), 0.0);
        assert!(min_heavy_distance(&[], &[[1.0; 3]]).is_err());
    }

    #[test]
    fn hydrogen_only_residue_is_rejected() {
        let top = Topology::from_residues(&[
            ("GLY", vec![("CA", Element::C)]),
            ("GLY", vec![("H", Element::H)]),
        ])
        .unwrap();
        assert!(knn_graph(&[[0.0; 3], [1.0, 0.0, 0.0]], &top, 1).is_err());
    }

    #[test]
    fn collinear_neighbours() {
        let top = carbons(4);
        let coords: Vec<Vec3> = (0..4).map(|i| [i as f64, 0.0, 0.0]).collect();
        let g = knn_graph(&coords, &top, 2).unwrap();
        assert_eq!(g.row(0).0, &[1, 2]);
        // Residue 1 is equidistant from 0 and 2; the lower index wins.
        assert_eq!(g.row(1).0, &[0, 2]);
    }

    #[test]
    fn k_is_clipped() {
        let top = carbons(3);
        let coords: Vec<Vec3> = (0..3).map(|i| [i as f64, 0.0, 0.0]).collect();
        let g = knn_graph(&coords, &top, 10).unwrap();
        assert_eq!(g.k, 2);
        assert!(knn_graph(&coords[..1], &carbons(1), 1).is_err());
    }

    #[test]
    fn rbf_examples() {
        let cfg = RbfConfig { n_centers: 2, d_max: 1.0, sigma: 1.0 };
        let f = rbf_expand(0.0, &cfg);
        assert_eq!(f[0], 1.0);
        assert!((f[1] - (-0.5_f64).exp()).abs() < 1e-15);
        assert!((f[1] - 0.60653).abs() < 1e-5);
        let cfg = RbfConfig::default();
        assert_eq!(rbf_expand(cfg.center(7), &cfg)[7], 1.0);
        assert!(rbf_expand(cfg.d_max + 7.0 * cfg.sigma, &cfg).iter().all(|&v| v < 1e-6));
    }

    #[test]
    fn graph_dump_format() {
        let top = carbons(2);
        let g = knn_graph(&[[0.0; 3], [2.0, 0.0, 0.0]], &top, 1).unwrap();
        assert_eq!(graph_csv(&[g]), "frame,i,rank,j,d_ij\n0,0,0,1,2.0\n0,1,0,0,2.0\n");
    }
}
