//! Two-stage training.
//!
//! Stage 1 maximises the batch VAMP-2 score of the encoder. Stage 2 adds the
//! reweighting vector `ũ` and kernel `W̃` of the constrained Koopman matrix and
//! maximises VAMP-E of `A = K (Cττ + eps I)⁻¹` under reweighted covariances;
//! the encoder stays frozen for the first `warmup_epochs`.
//!
//! Batches are encoded in chunks of `chunk_frames` frames. The loss is
//! evaluated on a small tape whose leaves are the assignment matrices, and its
//! gradient is pushed back through each chunk by re-running that chunk's
//! forward pass, which keeps memory bounded by one chunk.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, Adam, Tape, Tensor, Var};
use crate::encoder::{Encoder, EncoderConfig, GraphBatch, Standardizer, N_PHYS};
use crate::graph::{build_graph, knn_graph, rbf_expand_into, KnnGraph, ResidueGraph};
use crate::linalg::Mat;
use crate::physchem::{physical_features, PhysicalFeatures, SasaParams};
use crate::trajectory::{Topology, Trajectory};
use crate::vamp::{
    build_constrained_k, constrained_k_on, koopman_estimate_pairs, covariances, covariances_on, ctt_inverse_on, mat_to_tensor, tensor_to_mat,
    vamp2_on, vamp2_score, vamp_e_on, vamp_e_score, ConstrainedKoopman,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lag: usize,
    pub batch_size: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    pub chunk_frames: usize,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lag: 5,
            batch_size: 1024,
            lr_stage1: 1e-3,
            lr_stage2: 3e-4,
            epochs_stage1: 30,
            epochs_stage2: 30,
            warmup_epochs: 5,
            seed: 0,
            validation_fraction: 0.2,
            chunk_frames: 256,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.lag < 1 {
            return Err(Error::InvalidInput("lag must be at least 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::InvalidInput(format!(
                "validation fraction {} outside (0, 1)",
                self.validation_fraction
            )));
        }
        if self.batch_size < 2 * self.encoder.n_states || self.chunk_frames == 0 {
            return Err(Error::InvalidInput("batch size must be at least twice the state count".into()));
        }
        if !(self.lr_stage1 >= 0.0 && self.lr_stage2 >= 0.0) {
            return Err(Error::InvalidInput("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// `(t, t + lag)` frame pairs within each trajectory, as global frame indices
/// over the concatenation of trajectories with the given lengths.
pub fn make_pairs(lengths: &[usize], lag: usize) -> Result<Vec<(usize, usize)>> {
    let mut pairs = Vec::new();
    let mut offset = 0;
    for &len in lengths {
        for t in 0..len.saturating_sub(lag) {
            pairs.push((offset + t, offset + t + lag));
        }
        offset += len;
    }
    if pairs.is_empty() {
        return Err(Error::InvalidInput(format!("no trajectory is longer than the lag {lag}")));
    }
    Ok(pairs)
}

/// Featurised frames of several trajectories over one topology.
#[derive(Debug, Clone)]
pub struct Dataset {
    topology: Arc<Topology>,
    residue_types: Vec<usize>,
    lengths: Vec<usize>,
    graphs: Vec<KnnGraph>,
    physical: Vec<[f64; N_PHYS]>,
    dt_ps: f64,
}

impl Dataset {
    /// Computes graphs and physical features of every frame.
    pub fn from_trajectories(trajectories: &[Trajectory], k: usize, sasa: &SasaParams) -> Result<Self> {
        let physical = trajectories
            .iter()
            .map(|t| physical_features(t, sasa))
            .collect::<Result<Vec<_>>>()?;
        Self::with_features(trajectories, k, &physical)
    }

    /// Uses precomputed per-frame physical features.
    pub fn with_features(trajectories: &[Trajectory], k: usize, physical: &[Vec<PhysicalFeatures>]) -> Result<Self> {
        let first = trajectories.first().ok_or_else(|| Error::InvalidInput("no trajectories".into()))?;
        let topology = first.topology().clone();
        if physical.len() != trajectories.len() {
            return Err(Error::Consistency("one feature series per trajectory required".into()));
        }
        let mut graphs = Vec::new();
        let mut phys = Vec::new();
        for (t, p) in trajectories.iter().zip(physical) {
            if t.topology().as_ref() != topology.as_ref() {
                return Err(Error::Consistency("trajectories use different topologies".into()));
            }
            if p.len() != t.n_frames() {
                return Err(Error::Consistency(format!("{} feature rows for {} frames", p.len(), t.n_frames())));
            }
            let g: Vec<KnnGraph> = (0..t.n_frames())
                .into_par_iter()
                .map(|f| knn_graph(t.frame(f), &topology, k))
                .collect::<Result<_>>()?;
            graphs.extend(g);
            phys.extend(p.iter().map(PhysicalFeatures::as_vector));
        }
        Ok(Self {
            residue_types: topology.residue_types()?,
            topology,
            lengths: trajectories.iter().map(Trajectory::n_frames).collect(),
            graphs,
            physical: phys,
            dt_ps: first.dt_ps(),
        })
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn n_frames(&self) -> usize {
        self.graphs.len()
    }

    pub fn dt_ps(&self) -> f64 {
        self.dt_ps
    }

    pub fn physical(&self) -> &[[f64; N_PHYS]] {
        &self.physical
    }

    /// Global index of the first frame of each trajectory.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.lengths
            .iter()
            .map(|l| {
                let o = acc;
                acc += l;
                o
            })
            .collect()
    }

    pub fn batch(&self, frames: &[usize], std: &Standardizer, config: &EncoderConfig) -> Result<GraphBatch> {
        let graphs: Vec<ResidueGraph> = frames
            .iter()
            .map(|&f| {
                let knn = self.graphs[f].clone();
                let kr = config.rbf.n_centers;
                let mut edge_features = vec![0.0; knn.distances.len() * kr];
                for (e, &d) in knn.distances.iter().enumerate() {
                    rbf_expand_into(d, &config.rbf, &mut edge_features[e * kr..(e + 1) * kr]);
                }
                ResidueGraph { knn, rbf: config.rbf, edge_features }
            })
            .collect();
        let phys: Vec<[f64; N_PHYS]> = frames.iter().map(|&f| std.apply(self.physical[f])).collect();
        GraphBatch::new(&self.residue_types, &graphs, &phys)
    }
}

/// Builds a batch straight from coordinates (used for probing single frames).
pub fn frame_batch(
    topology: &Topology,
    frames: &[&[crate::trajectory::Vec3]],
    physical: &[PhysicalFeatures],
    std: &Standardizer,
    config: &EncoderConfig,
) -> Result<GraphBatch> {
    let graphs = frames
        .iter()
        .map(|f| build_graph(f, topology, config.k, &config.rbf))
        .collect::<Result<Vec<_>>>()?;
    let phys: Vec<[f64; N_PHYS]> = physical.iter().map(|p| std.apply(p.as_vector())).collect();
    GraphBatch::new(&topology.residue_types()?, &graphs, &phys)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub train_score: f64,
    pub val_score: f64,
}

/// Trajectory-level split. Trajectories are shuffled with the seed; with a single
/// trajectory, contiguous segments stand in for trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// `(start, len)` global frame ranges.
    pub train: Vec<(usize, usize)>,
    pub val: Vec<(usize, usize)>,
}

pub fn split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Split> {
    let mut units: Vec<(usize, usize)> = dataset.offsets().into_iter().zip(dataset.lengths().iter().copied()).collect();
    if units.len() < 2 {
        let (start, len) = units[0];
        let parts = (1.0 / fraction).ceil().max(2.0) as usize;
        let size = len / parts;
        units = (0..parts)
            .map(|p| {
                let s = start + p * size;
                let e = if p + 1 == parts { start + len } else { s + size };
                (s, e - s)
            })
            .collect();
    }
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5b17));
    let n_val = ((units.len() as f64 * fraction).round() as usize).clamp(1, units.len() - 1);
    let mut val: Vec<(usize, usize)> = order[..n_val].iter().map(|&i| units[i]).collect();
    let mut train: Vec<(usize, usize)> = order[n_val..].iter().map(|&i| units[i]).collect();
    val.sort_unstable();
    train.sort_unstable();
    Ok(Split { train, val })
}

fn range_pairs(ranges: &[(usize, usize)], lag: usize) -> Vec<(usize, usize)> {
    ranges
        .iter()
        .flat_map(|&(s, l)| (0..l.saturating_sub(lag)).map(move |t| (s + t, s + t + lag)))
        .collect()
}

fn range_frames(ranges: &[(usize, usize)]) -> Vec<usize> {
    ranges.iter().flat_map(|&(s, l)| s..s + l).collect()
}

/// A trained (or partially trained) model with everything needed for inference.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: TrainConfig,
    pub encoder: Encoder,
    pub standardizer: Standardizer,
    pub u_raw: Vec<f64>,
    pub w_raw: Mat,
    pub stage: Stage,
    pub history: Vec<EpochRecord>,
    pub adam_step: u64,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub koopman: Option<ConstrainedKoopman>,
}

impl Model {
    /// `[n, m]` state probabilities for the given global frames.
    pub fn chi(&self, data: &Dataset, frames: &[usize]) -> Result<Mat> {
        Ok(self.embed(data, frames)?.1)
    }

    /// `z` embeddings and `chi` for the given global frames.
    pub fn embed(&self, data: &Dataset, frames: &[usize]) -> Result<(Mat, Mat)> {
        let (d, m) = (self.config.encoder.d_h, self.config.encoder.n_states);
        let mut z = Mat::zeros(frames.len(), d);
        let mut chi = Mat::zeros(frames.len(), m);
        let mut row = 0;
        for chunk in frames.chunks(self.config.chunk_frames) {
            let batch = data.batch(chunk, &self.standardizer, &self.config.encoder)?;
            let (zt, ct) = self.encoder.embed(&batch)?;
            for i in 0..chunk.len() {
                z.set_row(row + i, &nalgebra::RowDVector::from_row_slice(zt.row(i)));
                chi.set_row(row + i, &nalgebra::RowDVector::from_row_slice(ct.row(i)));
            }
            row += chunk.len();
        }
        Ok((z, chi))
    }

    /// Per-frame incoming attention per residue.
    pub fn attention(&self, data: &Dataset, frames: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(self.config.chunk_frames) {
            let batch = data.batch(chunk, &self.standardizer, &self.config.encoder)?;
            out.extend(self.encoder.incoming_attention(&batch)?);
        }
        Ok(out)
    }

    pub fn log_csv(&self) -> String {
        history_csv(&self.history)
    }

    /// Binary parameter file: encoder parameters, then `koopman.u_raw`,
    /// `koopman.w_raw` and the optimizer moments.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut named = self.encoder.named();
        let m = self.u_raw.len();
        named.push(("koopman.u_raw".into(), Tensor::matrix(m, 1, self.u_raw.clone()).expect("u shape")));
        named.push(("koopman.w_raw".into(), mat_to_tensor(&self.w_raw)));
        let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
        for (i, t) in self.adam_m.iter().enumerate() {
            named.push((format!("adam.m.{}", names.get(i).map_or("?", String::as_str)), t.clone()));
        }
        for (i, t) in self.adam_v.iter().enumerate() {
            named.push((format!("adam.v.{}", names.get(i).map_or("?", String::as_str)), t.clone()));
        }
        checkpoint::encode(&named)
    }

    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            config: self.config,
            standardizer: self.standardizer,
            stage: self.stage,
            history: self.history.clone(),
            adam_step: self.adam_step,
            n_adam_moments: self.adam_m.len(),
            koopman: self.koopman.clone(),
        }
    }

    pub fn from_parts(bytes: &[u8], sidecar: Sidecar) -> Result<Self> {
        let mut named = checkpoint::decode(bytes)?;
        let n_enc = Encoder::new(sidecar.config.encoder, 0)?.params().len();
        if named.len() < n_enc + 2 + 2 * sidecar.n_adam_moments {
            return Err(Error::Consistency(format!("checkpoint holds {} tensors", named.len())));
        }
        let tail = named.split_off(n_enc);
        let encoder = Encoder::from_named(sidecar.config.encoder, named)?;
        let find = |name: &str| -> Result<Tensor> {
            tail.iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Consistency(format!("checkpoint lacks '{name}'")))
        };
        let u_raw = find("koopman.u_raw")?.into_data();
        let w_raw = tensor_to_mat(&find("koopman.w_raw")?)?;
        let moments = &tail[2..];
        let k = sidecar.n_adam_moments;
        Ok(Self {
            config: sidecar.config,
            encoder,
            standardizer: sidecar.standardizer,
            u_raw,
            w_raw,
            stage: sidecar.stage,
            history: sidecar.history,
            adam_step: sidecar.adam_step,
            adam_m: moments[..k].iter().map(|(_, t)| t.clone()).collect(),
            adam_v: moments[k..2 * k].iter().map(|(_, t)| t.clone()).collect(),
            koopman: sidecar.koopman,
        })
    }
}

/// JSON companion of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config: TrainConfig,
    pub standardizer: Standardizer,
    pub stage: Stage,
    pub history: Vec<EpochRecord>,
    pub adam_step: u64,
    pub n_adam_moments: usize,
    pub koopman: Option<ConstrainedKoopman>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,stage,train_score,val_score\n");
    for r in history {
        writeln!(out, "{},{},{:?},{:?}", r.epoch, r.stage.as_str(), r.train_score, r.val_score).expect("string write");
    }
    out
}

/// Progress snapshot passed to the observer after every epoch; the observer
/// returns `false` to end the stage early.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub stage: Stage,
    pub epoch: usize,
    pub epochs: usize,
    pub train_score: f64,
    pub val_score: f64,
}

/// Result of a stage: the model holds the last parameters whose loss was finite.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub model: Model,
    pub aborted: Option<String>,
}

/// Everything the stages need about the data split.
pub struct Prepared<'a> {
    pub data: &'a Dataset,
    pub split: Split,
    train_pairs: Vec<(usize, usize)>,
    val_pairs: Vec<(usize, usize)>,
    train_frames: Vec<usize>,
    val_frames: Vec<usize>,
}

impl<'a> Prepared<'a> {
    pub fn new(data: &'a Dataset, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let split = split(data, config.validation_fraction, config.seed)?;
        let train_pairs = range_pairs(&split.train, config.lag);
        let val_pairs = range_pairs(&split.val, config.lag);
        if train_pairs.len() < config.encoder.n_states || val_pairs.len() < config.encoder.n_states {
            return Err(Error::InvalidInput(format!(
                "{} training and {} validation pairs at lag {}; too few",
                train_pairs.len(),
                val_pairs.len(),
                config.lag
            )));
        }
        let train_frames = range_frames(&split.train);
        let val_frames = range_frames(&split.val);
        Ok(Self { data, split, train_pairs, val_pairs, train_frames, val_frames })
    }

    pub fn train_pairs(&self) -> &[(usize, usize)] {
        &self.train_pairs
    }

    pub fn val_pairs(&self) -> &[(usize, usize)] {
        &self.val_pairs
    }

    pub fn val_frames(&self) -> &[usize] {
        &self.val_frames
    }
}

/// Paired assignment rows `(X0, Xτ)` from per-frame values over `frames`.
fn paired(chi: &Mat, frames: &[usize], pairs: &[(usize, usize)]) -> (Mat, Mat) {
    let mut pos = std::collections::HashMap::with_capacity(frames.len());
    for (i, &f) in frames.iter().enumerate() {
        pos.insert(f, i);
    }
    let m = chi.ncols();
    let mut x0 = Mat::zeros(pairs.len(), m);
    let mut xt = Mat::zeros(pairs.len(), m);
    for (r, (a, b)) in pairs.iter().enumerate() {
        x0.set_row(r, &chi.row(pos[a]));
        xt.set_row(r, &chi.row(pos[b]));
    }
    (x0, xt)
}

/// Full-data VAMP-2 of a frame set.
fn score_vamp2(model: &Model, data: &Dataset, frames: &[usize], pairs: &[(usize, usize)]) -> Result<f64> {
    let chi = model.chi(data, frames)?;
    let (x0, xt) = paired(&chi, frames, pairs);
    vamp2_score(&covariances(&x0, &xt, None, model.config.lag)?)
}

/// Full-data reweighted VAMP-E with `A = K (Cττ + eps I)⁻¹`, plus the constrained `K`.
fn score_vamp_e(model: &Model, data: &Dataset, frames: &[usize], pairs: &[(usize, usize)]) -> Result<(f64, ConstrainedKoopman)> {
    let chi = model.chi(data, frames)?;
    let (x0, xt) = paired(&chi, frames, pairs);
    let ck = build_constrained_k(&model.u_raw, &model.w_raw, &xt)?;
    let cov = covariances(&x0, &xt, Some(&ck.weights), model.config.lag)?;
    let (_, ctt_inv) = cov.inverses()?;
    let a = ck.k_matrix() * ctt_inv;
    Ok((vamp_e_score(&cov, &a)?, ck))
}

/// Sums parameter gradients of `seed · chi` over chunks of `frames`.
fn encoder_gradients(model: &Model, data: &Dataset, frames: &[usize], seed: &Tensor) -> Result<Vec<Tensor>> {
    let mut total: Vec<Tensor> = model.encoder.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let m = seed.cols();
    let mut row = 0;
    for chunk in frames.chunks(model.config.chunk_frames) {
        let batch = data.batch(chunk, &model.standardizer, &model.config.encoder)?;
        let mut tape = Tape::new();
        let vars = model.encoder.bind(&mut tape, true);
        let out = model.encoder.forward_on(&mut tape, &vars, &batch)?;
        let s = Tensor::matrix(chunk.len(), m, seed.data()[row * m..(row + chunk.len()) * m].to_vec())?;
        let mut grads = tape.backward_from(out.chi, s)?;
        for (t, v) in total.iter_mut().zip(&vars) {
            let g = grads.take(*v);
            t.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
        row += chunk.len();
    }
    Ok(total)
}

fn batches(pairs: &[(usize, usize)], size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<(usize, usize)>> {
    let mut order = pairs.to_vec();
    order.shuffle(rng);
    order
        .chunks(size)
        .filter(|c| c.len() * 4 >= size || c.len() == order.len())
        .map(<[_]>::to_vec)
        .collect()
}

fn stack_frames(batch: &[(usize, usize)]) -> Vec<usize> {
    batch.iter().map(|p| p.0).chain(batch.iter().map(|p| p.1)).collect()
}

fn split_seed(grad0: &Tensor, gradt: &Tensor) -> Result<Tensor> {
    let (n, m) = grad0.dims()?;
    let mut data = grad0.data().to_vec();
    data.extend_from_slice(gradt.data());
    Tensor::matrix(2 * n, m, data)
}

/// Fresh model with initial parameters and statistics fitted on the training frames.
pub fn init_model(prepared: &Prepared, config: &TrainConfig) -> Result<Model> {
    let encoder = Encoder::new(config.encoder, config.seed)?;
    let rows: Vec<[f64; N_PHYS]> = prepared.train_frames.iter().map(|&f| prepared.data.physical[f]).collect();
    let m = config.encoder.n_states;
    Ok(Model {
        config: *config,
        standardizer: Standardizer::fit(&rows)?,
        adam_m: Vec::new(),
        adam_v: Vec::new(),
        adam_step: 0,
        encoder,
        u_raw: vec![0.0; m],
        w_raw: Mat::zeros(m, m),
        stage: Stage::Stage1,
        history: Vec::new(),
        koopman: None,
    })
}

/// VAMP-2 pretraining.
pub fn stage1_pretrain(prepared: &Prepared, model: Model, observer: &mut dyn FnMut(&Progress) -> bool) -> Result<Outcome> {
    let config = model.config;
    let mut model = model;
    model.stage = Stage::Stage1;
    let mut opt = Adam::new(config.lr_stage1, model.encoder.params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let data = prepared.data;
    for epoch in 1..=config.epochs_stage1 {
        for batch in batches(&prepared.train_pairs, config.batch_size, &mut rng) {
            let frames = stack_frames(&batch);
            let chi = model.chi(data, &frames)?;
            let n = batch.len();
            let step = (|| -> Result<Vec<Tensor>> {
                let mut tape = Tape::new();
                let x0 = tape.leaf(mat_to_tensor(&chi.rows(0, n).into_owned()));
                let xt = tape.leaf(mat_to_tensor(&chi.rows(n, n).into_owned()));
                let cov = covariances_on(&mut tape, x0, xt, None)?;
                let score = vamp2_on(&mut tape, &cov)?;
                let loss = tape.scale(score, -1.0)?;
                let grads = tape.backward(loss)?;
                let seed = split_seed(&grads.get(x0), &grads.get(xt))?;
                encoder_gradients(&model, data, &frames, &seed)
            })();
            let grads = match step {
                Ok(g) => g,
                Err(e @ (Error::NonFinite(_) | Error::NotPositiveDefinite { .. })) => {
                    return Ok(Outcome { model, aborted: Some(format!("stage 1 epoch {epoch}: {e}")) })
                }
                Err(e) => return Err(e),
            };
            let before = model.encoder.params().to_vec();
            if let Err(e) = opt.step(model.encoder.params_mut(), &grads) {
                model.encoder.params_mut().clone_from_slice(&before);
                return Ok(Outcome { model, aborted: Some(format!("stage 1 epoch {epoch}: {e}")) });
            }
        }
        let train_score = score_vamp2(&model, data, &prepared.train_frames, &prepared.train_pairs)?;
        let val_score = score_vamp2(&model, data, &prepared.val_frames, &prepared.val_pairs)?;
        let record = EpochRecord { epoch, stage: Stage::Stage1, train_score, val_score };
        model.history.push(record);
        model.adam_step = opt.step;
        model.adam_m = opt.m.clone();
        model.adam_v = opt.v.clone();
        if !observer(&Progress { stage: Stage::Stage1, epoch, epochs: config.epochs_stage1, train_score, val_score }) {
            break;
        }
    }
    Ok(Outcome { model, aborted: None })
}

/// Initial `W̃` whose kernel `exp(W̃) + exp(W̃)ᵀ` is the symmetrised
/// `diag(π) K` of the clipped instantaneous estimate `K = (C00 + eps I)⁻¹ C0τ`.
fn kernel_init(chi: &Mat, frames: &[usize], pairs: &[(usize, usize)], lag: usize) -> Result<Mat> {
    let (x0, xt) = paired(chi, frames, pairs);
    let k = koopman_estimate_pairs(&x0, &xt, lag)?;
    let m = k.nrows();
    let pi: Vec<f64> = (0..m).map(|j| x0.column(j).mean()).collect();
    let flux = Mat::from_fn(m, m, |i, j| 0.5 * (pi[i] * k[(i, j)] + pi[j] * k[(j, i)]));
    Ok(flux.map(|v| (v.max(1e-8) / 2.0).ln()))
}

/// Constrained VAMP-E training.
pub fn stage2_constrained(prepared: &Prepared, model: Model, observer: &mut dyn FnMut(&Progress) -> bool) -> Result<Outcome> {
    let config = model.config;
    let data = prepared.data;
    let mut model = model;
    model.stage = Stage::Stage2;
    let m = config.encoder.n_states;
    let chi_train = model.chi(data, &prepared.train_frames)?;
    model.u_raw = vec![0.0; m];
    model.w_raw = kernel_init(&chi_train, &prepared.train_frames, &prepared.train_pairs, config.lag)?;

    let n_enc = model.encoder.params().len();
    let mut all: Vec<Tensor> = model.encoder.params().to_vec();
    all.push(Tensor::matrix(m, 1, model.u_raw.clone())?);
    all.push(mat_to_tensor(&model.w_raw));
    let mut opt_enc = Adam::new(config.lr_stage2, &all[..n_enc]);
    let mut opt_k = Adam::new(config.lr_stage2, &all[n_enc..]);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let mut frozen_chi: Option<Mat> = Some(chi_train);

    for epoch in 1..=config.epochs_stage2 {
        let frozen = epoch <= config.warmup_epochs;
        if !frozen {
            frozen_chi = None;
        }
        let pos: std::collections::HashMap<usize, usize> =
            prepared.train_frames.iter().enumerate().map(|(i, &f)| (f, i)).collect();
        for batch in batches(&prepared.train_pairs, config.batch_size, &mut rng) {
            let frames = stack_frames(&batch);
            let chi = match &frozen_chi {
                Some(all_chi) => {
                    let mut c = Mat::zeros(frames.len(), m);
                    for (r, f) in frames.iter().enumerate() {
                        c.set_row(r, &all_chi.row(pos[f]));
                    }
                    c
                }
                None => model.chi(data, &frames)?,
            };
            let n = batch.len();
            let step = (|| -> Result<(Vec<Tensor>, Vec<Tensor>)> {
                let mut tape = Tape::new();
                let x0 = tape.leaf(mat_to_tensor(&chi.rows(0, n).into_owned()));
                let xt = tape.leaf(mat_to_tensor(&chi.rows(n, n).into_owned()));
                let u: Var = tape.leaf(Tensor::matrix(m, 1, model.u_raw.clone())?);
                let w: Var = tape.leaf(mat_to_tensor(&model.w_raw));
                let kv = constrained_k_on(&mut tape, u, w, xt)?;
                let cov = covariances_on(&mut tape, x0, xt, Some(kv.weights))?;
                let ctt_inv = ctt_inverse_on(&mut tape, &cov)?;
                let a = tape.matmul(kv.k, ctt_inv)?;
                let score = vamp_e_on(&mut tape, &cov, a)?;
                let loss = tape.scale(score, -1.0)?;
                let grads = tape.backward(loss)?;
                let k_grads = vec![grads.get(u), grads.get(w)];
                let enc_grads = if frozen {
                    Vec::new()
                } else {
                    let seed = split_seed(&grads.get(x0), &grads.get(xt))?;
                    encoder_gradients(&model, data, &frames, &seed)?
                };
                Ok((enc_grads, k_grads))
            })();
            let (enc_grads, k_grads) = match step {
                Ok(g) => g,
                Err(e @ (Error::NonFinite(_) | Error::NotPositiveDefinite { .. } | Error::StateStarved { .. })) => {
                    return Ok(Outcome { model, aborted: Some(format!("stage 2 epoch {epoch}: {e}")) })
                }
                Err(e) => return Err(e),
            };
            let mut kp = vec![Tensor::matrix(m, 1, model.u_raw.clone())?, mat_to_tensor(&model.w_raw)];
            if let Err(e) = opt_k.step(&mut kp, &k_grads) {
                return Ok(Outcome { model, aborted: Some(format!("stage 2 epoch {epoch}: {e}")) });
            }
            if !frozen {
                let before = model.encoder.params().to_vec();
                if let Err(e) = opt_enc.step(model.encoder.params_mut(), &enc_grads) {
                    model.encoder.params_mut().clone_from_slice(&before);
                    return Ok(Outcome { model, aborted: Some(format!("stage 2 epoch {epoch}: {e}")) });
                }
            }
            model.u_raw = kp[0].data().to_vec();
            model.w_raw = tensor_to_mat(&kp[1])?;
        }
        let (train_score, ck) = score_vamp_e(&model, data, &prepared.train_frames, &prepared.train_pairs)?;
        let (val_score, _) = score_vamp_e(&model, data, &prepared.val_frames, &prepared.val_pairs)?;
        model.koopman = Some(ck);
        model.history.push(EpochRecord { epoch, stage: Stage::Stage2, train_score, val_score });
        model.adam_step = opt_enc.step;
        model.adam_m = opt_enc.m.clone();
        model.adam_v = opt_enc.v.clone();
        if !observer(&Progress { stage: Stage::Stage2, epoch, epochs: config.epochs_stage2, train_score, val_score }) {
            break;
        }
    }
    Ok(Outcome { model, aborted: None })
}

/// Stage 1 followed by stage 2; stops after a stage that aborted.
/// Ending stage 1 early through the observer still runs stage 2.
pub fn train(data: &Dataset, config: &TrainConfig, observer: &mut dyn FnMut(&Progress) -> bool) -> Result<Outcome> {
    let prepared = Prepared::new(data, config)?;
    let model = init_model(&prepared, config)?;
    let first = stage1_pretrain(&prepared, model, observer)?;
    if first.aborted.is_some() || config.epochs_stage2 == 0 {
        return Ok(first);
    }
    stage2_constrained(&prepared, first.model, observer)
}

/// Validation VAMP-2 and reweighted VAMP-E of a model on its validation split.
pub fn validation_scores(prepared: &Prepared, model: &Model) -> Result<(f64, f64)> {
    let v2 = score_vamp2(model, prepared.data, &prepared.val_frames, &prepared.val_pairs)?;
    let (ve, _) = score_vamp_e(model, prepared.data, &prepared.val_frames, &prepared.val_pairs)?;
    Ok((v2, ve))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_examples() {
        assert_eq!(make_pairs(&[5], 2).unwrap(), vec![(0, 2), (1, 3), (2, 4)]);
        assert_eq!(make_pairs(&[3, 3], 2).unwrap(), vec![(0, 2), (3, 5)]);
        assert_eq!(make_pairs(&[2, 3], 2).unwrap(), vec![(2, 4)]);
        assert!(make_pairs(&[2], 2).is_err());
    }

    #[test]
    fn chunked_gradients_match_one_tape() {
        use crate::synth::{generate, HmmSpec};
        let (traj, _) = generate(&HmmSpec::default(), 23, 5).unwrap();
        let data = Dataset::from_trajectories(&[traj], 4, &SasaParams::default()).unwrap();
        let config = TrainConfig {
            chunk_frames: 5,
            encoder: EncoderConfig { n_layers: 2, d_h: 6, k: 4, ..EncoderConfig::default() },
            ..TrainConfig::default()
        };
        let standardizer = Standardizer::fit(data.physical()).unwrap();
        let model = Model {
            config,
            encoder: Encoder::new(config.encoder, 3).unwrap(),
            standardizer,
            u_raw: vec![0.0; 4],
            w_raw: Mat::zeros(4, 4),
            stage: Stage::Stage1,
            history: Vec::new(),
            adam_step: 0,
            adam_m: Vec::new(),
            adam_v: Vec::new(),
            koopman: None,
        };
        let frames: Vec<usize> = (0..23).rev().collect();
        let seed = Tensor::matrix(23, 4, (0..92).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect()).unwrap();
        let chunked = encoder_gradients(&model, &data, &frames, &seed).unwrap();

        let batch = data.batch(&frames, &model.standardizer, &config.encoder).unwrap();
        let mut tape = Tape::new();
        let vars = model.encoder.bind(&mut tape, true);
        let out = model.encoder.forward_on(&mut tape, &vars, &batch).unwrap();
        let grads = tape.backward_from(out.chi, seed).unwrap();
        for (c, v) in chunked.iter().zip(&vars) {
            let whole = grads.get(*v);
            let scale = whole.data().iter().fold(1e-12f64, |m, x| m.max(x.abs()));
            assert!(c.max_abs_diff(&whole) <= 1e-12 * scale);
        }
    }

    #[test]
    fn history_csv_format() {
        let h = [EpochRecord { epoch: 1, stage: Stage::Stage1, train_score: 2.5, val_score: 2.0 }];
        assert_eq!(history_csv(&h), "epoch,stage,train_score,val_score\n1,stage1,2.5,2.0\n");
    }
}
