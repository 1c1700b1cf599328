//! The state encoder.
//!
//! Residue embeddings pass through `L` attention-weighted continuous-filter
//! convolutions over the residue graph and are mean-pooled to `v_G`. The
//! physical vector `p = [Rg, SASA]` is lifted to `p' = normalize(relu(W1 p + b1))`,
//! a scalar gate `alpha = sigmoid(Wg [v_G | p'] + bg)` mixes the two tracks into
//! `h_fuse = alpha v_G + (1 - alpha) p'`, and attention over the three slots
//! `{v_G, p', h_fuse}` gives `z`. State probabilities are `softmax(W_out z + b_out)`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Tape, Tensor, Var};
use crate::graph::{build_graph, RbfConfig, ResidueGraph, DEFAULT_K};
use crate::trajectory::{Topology, Vec3, AMINO_ACIDS};
use crate::{Error, Result};

/// Length of the physical input vector.
pub const N_PHYS: usize = 2;

const PER_LAYER: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_h: usize,
    pub n_states: usize,
    pub k: usize,
    pub rbf: RbfConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { n_layers: 3, d_h: 32, n_states: 4, k: DEFAULT_K, rbf: RbfConfig::default() }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.rbf.validate()?;
        if self.n_states < 2 || self.d_h == 0 || self.k == 0 {
            return Err(Error::InvalidInput(format!("invalid encoder config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Xavier,
    Zero,
}

/// Parameter names and shapes in storage order.
fn layout(c: &EncoderConfig) -> Vec<(String, [usize; 2], Init)> {
    let (d, kr) = (c.d_h, c.rbf.n_centers);
    let mut out = vec![("embedding".to_string(), [AMINO_ACIDS.len(), d], Init::Xavier)];
    for l in 0..c.n_layers {
        let p = |s: &str| format!("conv{l}.{s}");
        out.extend([
            (p("filter1.w"), [kr, d], Init::Xavier),
            (p("filter1.b"), [1, d], Init::Zero),
            (p("filter2.w"), [d, d], Init::Xavier),
            (p("filter2.b"), [1, d], Init::Zero),
            (p("attn.wi"), [d, d], Init::Xavier),
            (p("attn.wj"), [d, d], Init::Xavier),
            (p("attn.we"), [d, d], Init::Xavier),
            (p("attn.b"), [1, d], Init::Zero),
            (p("attn.a"), [d, 1], Init::Xavier),
            (p("update1.w"), [d, d], Init::Xavier),
            (p("update1.b"), [1, d], Init::Zero),
            (p("update2.w"), [d, d], Init::Xavier),
            (p("update2.b"), [1, d], Init::Zero),
        ]);
    }
    out.extend([
        ("phys.w1".to_string(), [N_PHYS, d], Init::Xavier),
        ("phys.b1".to_string(), [1, d], Init::Zero),
        ("gate.w".to_string(), [2 * d, 1], Init::Xavier),
        ("gate.b".to_string(), [1, 1], Init::Zero),
        ("pool.wq".to_string(), [d, d], Init::Xavier),
        ("pool.c".to_string(), [1, 3], Init::Zero),
        ("out.w".to_string(), [d, c.n_states], Init::Xavier),
        ("out.b".to_string(), [1, c.n_states], Init::Zero),
    ]);
    out
}

/// Indices of the non-convolutional parameters.
#[derive(Debug, Clone, Copy)]
struct Tail(usize);

impl Tail {
    fn phys_w1(self) -> usize {
        self.0
    }
    fn phys_b1(self) -> usize {
        self.0 + 1
    }
    fn gate_w(self) -> usize {
        self.0 + 2
    }
    fn gate_b(self) -> usize {
        self.0 + 3
    }
    fn pool_wq(self) -> usize {
        self.0 + 4
    }
    fn pool_c(self) -> usize {
        self.0 + 5
    }
    fn out_w(self) -> usize {
        self.0 + 6
    }
    fn out_b(self) -> usize {
        self.0 + 7
    }
}

/// Z-scoring of the physical inputs with training-set statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; N_PHYS],
    pub std: [f64; N_PHYS],
}

impl Default for Standardizer {
    fn default() -> Self {
        Self { mean: [0.0; N_PHYS], std: [1.0; N_PHYS] }
    }
}

impl Standardizer {
    /// Population statistics; a constant column gets unit scale.
    pub fn fit(rows: &[[f64; N_PHYS]]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("standardizer fitted on zero rows".into()));
        }
        let n = rows.len() as f64;
        let mut s = Self::default();
        for k in 0..N_PHYS {
            let mean = rows.iter().map(|r| r[k]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / n;
            s.mean[k] = mean;
            s.std[k] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(s)
    }

    pub fn apply(&self, p: [f64; N_PHYS]) -> [f64; N_PHYS] {
        std::array::from_fn(|k| (p[k] - self.mean[k]) / self.std[k])
    }
}

/// A batch of frames sharing one topology, flattened for the tape.
///
/// Node `b * n_nodes + i` is residue `i` of frame `b`; edge `node * k + r` is the
/// `r`-th neighbour of that node.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub n_frames: usize,
    pub n_nodes: usize,
    pub k: usize,
    node_types: Arc<[usize]>,
    receivers: Arc<[usize]>,
    senders: Arc<[usize]>,
    node_frame: Arc<[usize]>,
    edge_features: Tensor,
    physical: Tensor,
}

impl GraphBatch {
    /// `physical` rows must already be standardized.
    pub fn new(residue_types: &[usize], graphs: &[ResidueGraph], physical: &[[f64; N_PHYS]]) -> Result<Self> {
        let first = graphs.first().ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
        let (n, k, kr) = (first.n_nodes(), first.k(), first.rbf.n_centers);
        if residue_types.len() != n {
            return Err(Error::Consistency(format!("{} residue types for {n} nodes", residue_types.len())));
        }
        if let Some(&t) = residue_types.iter().find(|&&t| t >= AMINO_ACIDS.len()) {
            return Err(Error::InvalidInput(format!("residue type {t} out of range")));
        }
        if physical.len() != graphs.len() {
            return Err(Error::Consistency(format!("{} physical rows for {} graphs", physical.len(), graphs.len())));
        }
        let b = graphs.len();
        let mut receivers = Vec::with_capacity(b * n * k);
        let mut senders = Vec::with_capacity(b * n * k);
        let mut feats = Vec::with_capacity(b * n * k * kr);
        for (f, g) in graphs.iter().enumerate() {
            if g.n_nodes() != n || g.k() != k || g.rbf != first.rbf {
                return Err(Error::Consistency(format!("graph {f} does not match the batch layout")));
            }
            for i in 0..n {
                let (nb, _) = g.knn.row(i);
                for &j in nb {
                    receivers.push(f * n + i);
                    senders.push(f * n + j);
                }
            }
            feats.extend_from_slice(&g.edge_features);
        }
        let node_types: Vec<usize> = (0..b).flat_map(|_| residue_types.iter().copied()).collect();
        let node_frame: Vec<usize> = (0..b * n).map(|v| v / n).collect();
        let phys: Vec<f64> = physical.iter().flatten().copied().collect();
        Ok(Self {
            n_frames: b,
            n_nodes: n,
            k,
            node_types: node_types.into(),
            receivers: receivers.into(),
            senders: senders.into(),
            node_frame: node_frame.into(),
            edge_features: Tensor::matrix(b * n * k, kr, feats)?,
            physical: Tensor::matrix(b, N_PHYS, phys)?,
        })
    }

    /// Builds the residue graphs of the given frames.
    pub fn from_frames(
        topology: &Topology,
        frames: &[&[Vec3]],
        physical: &[[f64; N_PHYS]],
        config: &EncoderConfig,
    ) -> Result<Self> {
        let graphs = frames
            .iter()
            .map(|f| build_graph(f, topology, config.k, &config.rbf))
            .collect::<Result<Vec<_>>>()?;
        Self::new(&topology.residue_types()?, &graphs, physical)
    }

    pub fn n_edges(&self) -> usize {
        self.receivers.len()
    }

    /// Sender residue (within its frame) of every edge.
    pub fn sender_residue(&self, e: usize) -> usize {
        self.senders[e] % self.n_nodes
    }
}

/// Tape handles of one encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub h: Var,
    pub v_g: Var,
    pub p_prime: Var,
    pub alpha: Var,
    pub h_fuse: Var,
    pub beta: Var,
    pub z: Var,
    pub chi: Var,
    /// Per layer, `[n_edges, 1]` attention weights.
    pub attention: Vec<Var>,
}

/// Values for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub h: Vec<Vec<f64>>,
    pub v_g: Vec<f64>,
    pub p_prime: Vec<f64>,
    pub alpha: f64,
    pub h_fuse: Vec<f64>,
    pub z: Vec<f64>,
    pub chi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Encoder {
    /// Xavier-uniform weights, zero biases.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, [r, c], init) in layout(&config) {
            let t = match init {
                Init::Zero => Tensor::zeros(&[r, c]),
                Init::Xavier => {
                    let a = (6.0 / (r + c) as f64).sqrt();
                    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-a..a)).collect())?
                }
            };
            names.push(name);
            params.push(t);
        }
        Ok(Self { config, names, params })
    }

    pub fn from_named(config: EncoderConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if named.len() != expected.len() {
            return Err(Error::Consistency(format!(
                "{} parameters supplied, the configuration needs {}",
                named.len(),
                expected.len()
            )));
        }
        let mut names = Vec::new();
        let mut params = Vec::new();
        for ((name, t), (want, shape, _)) in named.into_iter().zip(expected) {
            if name != want || t.shape() != shape {
                return Err(Error::Consistency(format!(
                    "parameter '{name}' {:?}, expected '{want}' {shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            params.push(t);
        }
        Ok(Self { config, names, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.params.iter().cloned()).collect()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::InvalidInput(format!("no parameter '{name}'")))?;
        if value.shape() != self.params[i].shape() {
            return Err(Error::Shape(format!("'{name}' is {:?}, got {:?}", self.params[i].shape(), value.shape())));
        }
        self.params[i] = value;
        Ok(())
    }

    /// Places the parameters on `tape` as leaves (`trainable`) or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { tape.leaf(p.clone()) } else { tape.constant(p.clone()) })
            .collect()
    }

    fn tail(&self) -> Tail {
        Tail(1 + self.config.n_layers * PER_LAYER)
    }

    /// One residual convolution; returns the new node states and the attention weights.
    pub fn conv_layer(&self, tape: &mut Tape, p: &[Var], layer: usize, h: Var, batch: &GraphBatch) -> Result<(Var, Var)> {
        let w = |i: usize| p[1 + layer * PER_LAYER + i];
        let rbf = tape.constant(batch.edge_features.clone());
        let f = tape.linear(rbf, w(0), w(1))?;
        let f = tape.tanh(f)?;
        let filt = tape.linear(f, w(2), w(3))?;

        let hj = tape.gather_rows(h, batch.senders.clone())?;
        let msg = tape.mul(filt, hj)?;

        let pi = tape.matmul(h, w(4))?;
        let pi = tape.gather_rows(pi, batch.receivers.clone())?;
        let qj = tape.matmul(h, w(5))?;
        let qj = tape.gather_rows(qj, batch.senders.clone())?;
        let re = tape.linear(filt, w(6), w(7))?;
        let s = tape.add(pi, qj)?;
        let s = tape.add(s, re)?;
        let s = tape.tanh(s)?;
        let s = tape.matmul(s, w(8))?;
        let nodes = batch.n_frames * batch.n_nodes;
        let s = tape.reshape(s, nodes, batch.k)?;
        let a = tape.softmax(s, Axis::Cols)?;
        let a = tape.reshape(a, nodes * batch.k, 1)?;

        let weighted = tape.scale_rows(msg, a)?;
        let agg = tape.segment_sum(weighted, batch.receivers.clone(), nodes)?;
        let u = tape.linear(agg, w(9), w(10))?;
        let u = tape.tanh(u)?;
        let u = tape.linear(u, w(11), w(12))?;
        Ok((tape.add(h, u)?, a))
    }

    /// Full forward pass on `tape` with parameters bound by [`Encoder::bind`].
    pub fn forward_on(&self, tape: &mut Tape, p: &[Var], batch: &GraphBatch) -> Result<EncoderVars> {
        if p.len() != self.params.len() {
            return Err(Error::Shape(format!("{} bound parameters, expected {}", p.len(), self.params.len())));
        }
        let stage = |e: Error, name: &str| match e {
            Error::NonFinite(_) => Error::NonFinite(format!("encoder stage '{name}'")),
            other => other,
        };
        let t = self.tail();
        let mut h = tape.gather_rows(p[0], batch.node_types.clone())?;
        let mut attention = Vec::with_capacity(self.config.n_layers);
        for l in 0..self.config.n_layers {
            let (next, a) = self.conv_layer(tape, p, l, h, batch).map_err(|e| stage(e, "convolution"))?;
            h = next;
            attention.push(a);
        }
        let pooled = tape.segment_sum(h, batch.node_frame.clone(), batch.n_frames)?;
        let v_g = tape.scale(pooled, 1.0 / batch.n_nodes as f64)?;

        let phys = tape.constant(batch.physical.clone());
        let lifted = tape.linear(phys, p[t.phys_w1()], p[t.phys_b1()]).map_err(|e| stage(e, "physical"))?;
        let lifted = tape.relu(lifted)?;
        let p_prime = tape.l2_normalize_rows(lifted)?;

        let both = tape.concat(&[v_g, p_prime], Axis::Cols)?;
        let gate = tape.linear(both, p[t.gate_w()], p[t.gate_b()]).map_err(|e| stage(e, "gate"))?;
        let alpha = tape.sigmoid(gate)?;
        let diff = tape.sub(v_g, p_prime)?;
        let mixed = tape.scale_rows(diff, alpha)?;
        let h_fuse = tape.add(mixed, p_prime)?;

        let q = tape.matmul(h_fuse, p[t.pool_wq()])?;
        let mut scores = Vec::with_capacity(3);
        for slot in [v_g, p_prime, h_fuse] {
            let qs = tape.mul(q, slot)?;
            scores.push(tape.sum(qs, Some(Axis::Cols))?);
        }
        let scores = tape.concat(&scores, Axis::Cols)?;
        let scores = tape.add(scores, p[t.pool_c()])?;
        let beta = tape.softmax(scores, Axis::Cols)?;
        let mut z = None;
        for (i, slot) in [v_g, p_prime, h_fuse].into_iter().enumerate() {
            let b = tape.slice_cols(beta, i, i + 1)?;
            let term = tape.scale_rows(slot, b)?;
            z = Some(match z {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let z = z.expect("three slots");
        let logits = tape.linear(z, p[t.out_w()], p[t.out_b()]).map_err(|e| stage(e, "output"))?;
        let chi = tape.softmax(logits, Axis::Cols)?;
        Ok(EncoderVars { h, v_g, p_prime, alpha, h_fuse, beta, z, chi, attention })
    }

    /// State probabilities `[n_frames, m]` without keeping a tape.
    pub fn chi(&self, batch: &GraphBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let v = self.forward_on(&mut tape, &p, batch)?;
        Ok(tape.value(v.chi).clone())
    }

    /// Embeddings `z` and probabilities `chi` for every frame of the batch.
    pub fn embed(&self, batch: &GraphBatch) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let v = self.forward_on(&mut tape, &p, batch)?;
        Ok((tape.value(v.z).clone(), tape.value(v.chi).clone()))
    }

    /// Per-frame values of every encoder stage.
    pub fn encode(&self, batch: &GraphBatch) -> Result<Vec<EncoderOutput>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let v = self.forward_on(&mut tape, &p, batch)?;
        let rows = |var: Var, b: usize| tape.value(var).row(b).to_vec();
        let n = batch.n_nodes;
        Ok((0..batch.n_frames)
            .map(|b| EncoderOutput {
                h: (0..n).map(|i| tape.value(v.h).row(b * n + i).to_vec()).collect(),
                v_g: rows(v.v_g, b),
                p_prime: rows(v.p_prime, b),
                alpha: tape.value(v.alpha).at(b, 0),
                h_fuse: rows(v.h_fuse, b),
                z: rows(v.z, b),
                chi: rows(v.chi, b),
            })
            .collect())
    }

    /// Attention mass each residue receives as a sender, averaged over layers and
    /// divided by the residue count, so each frame's row sums to 1.
    pub fn incoming_attention(&self, batch: &GraphBatch) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let v = self.forward_on(&mut tape, &p, batch)?;
        let n = batch.n_nodes;
        let scale = 1.0 / (n as f64 * v.attention.len() as f64);
        let mut out = vec![vec![0.0; n]; batch.n_frames];
        for a in &v.attention {
            let a = tape.value(*a).data();
            for (e, &w) in a.iter().enumerate() {
                out[batch.receivers[e] / n][batch.sender_residue(e)] += w * scale;
            }
        }
        Ok(out)
    }
}

/// Index of the largest probability; ties go to the lowest index.
pub fn classify(chi: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in chi.iter().enumerate() {
        if v > chi[best] {
            best = i;
        }
    }
    best
}
