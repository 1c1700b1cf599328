//! Project-level operations behind the CLI commands and the training job.

use std::fs;
use std::path::Path;

use pis_core::graph::{graph_csv, knn_graph, KnnGraph};
use pis_core::linalg::{from_rows, to_rows};
use pis_core::physchem::{
    features_and_residue_sasa, metrics_csv, residue_csv, rmsf, PhysicalFeatures, ResidueMetrics, SasaParams,
};
use pis_core::synth::{generate_set, labels_csv, HmmSpec};
use pis_core::trainer::{self, Dataset, EpochRecord, Model, Progress, Sidecar, TrainConfig};
use pis_core::trajectory::pdb::write_pdb;
use pis_core::trajectory::pistrj::write_frames;
use pis_core::trajectory::Trajectory;
use pis_core::vamp::{ck_test, free_energy_surface, residue_contributions, CkTestResult, FreeEnergySurface, ResidueContribution};
use serde::{Deserialize, Serialize};

use crate::error::{io, Result, ServiceError};
use crate::store::{labels_name, metrics_name, sha256_hex, states_name, traj_name, ProjectStore};

pub const CHECKPOINT: &str = "model/checkpoint";
pub const SIDECAR: &str = "model/sidecar";
pub const HISTORY: &str = "model/history";
pub const RESIDUES: &str = "residues";
pub const FES: &str = "fes";
pub const CONTRIBUTIONS: &str = "contributions";
pub const CKTEST: &str = "cktest";
pub const SYNTH_SPEC: &str = "synth/spec";
pub const CK_STEPS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub rg: Vec<f64>,
    pub sasa: Vec<f64>,
}

impl MetricSeries {
    fn from_features(features: &[PhysicalFeatures]) -> Self {
        Self { rg: features.iter().map(|f| f.rg).collect(), sasa: features.iter().map(|f| f.sasa_total).collect() }
    }

    fn features(&self) -> Vec<PhysicalFeatures> {
        self.rg.iter().zip(&self.sasa).map(|(&rg, &sasa_total)| PhysicalFeatures { rg, sasa_total }).collect()
    }
}

/// Pooled over all trajectories of a project; `rmsf` needs at least two frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidueSummary {
    pub rmsf: Option<Vec<f64>>,
    pub res_sasa: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateAssignments {
    pub states: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkArtifact {
    pub lag: usize,
    pub steps: usize,
    pub results: Vec<CkTestResult>,
}

fn metric_inputs(store: &ProjectStore) -> Vec<String> {
    std::iter::once("manifest".to_string()).chain((0..store.n_trajectories()).map(metrics_name)).collect()
}

fn model_inputs() -> Vec<String> {
    vec![CHECKPOINT.to_string(), SIDECAR.to_string()]
}

/// Rg, SASA and per-residue summaries for every trajectory of the project.
pub fn compute_metrics(store: &ProjectStore, params: &SasaParams) -> Result<()> {
    let trajs = store.trajectories()?;
    let n_res = store.topology()?.n_residues();
    let total: usize = trajs.iter().map(Trajectory::n_frames).sum();
    let mut res_sasa = vec![0.0; n_res];
    for (i, t) in trajs.iter().enumerate() {
        let (features, mean) = features_and_residue_sasa(t, params)?;
        for (acc, m) in res_sasa.iter_mut().zip(mean) {
            *acc += m * t.n_frames() as f64 / total.max(1) as f64;
        }
        store.put_json(&metrics_name(i), &format!("metrics/{i}.json"), &MetricSeries::from_features(&features), &[traj_name(i)])?;
    }
    let rmsf = if total >= 2 { Some(rmsf(&Trajectory::concat(&trajs)?)?) } else { None };
    let inputs: Vec<String> = (0..trajs.len()).map(traj_name).collect();
    store.put_json(RESIDUES, "residues.json", &ResidueSummary { rmsf, res_sasa }, &inputs)?;
    Ok(())
}

/// Creates a project from a PDB topology and PISTRJ payloads and precomputes
/// the metric series.
pub fn ingest(root: &Path, topology_pdb: &str, trajectories: &[Vec<u8>], params: &SasaParams) -> Result<ProjectStore> {
    let store = ProjectStore::create(root, topology_pdb, trajectories)?;
    compute_metrics(&store, params)?;
    Ok(store)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    pub seed: u64,
    pub frames: usize,
    pub trajectories: usize,
}

/// Generates the synthetic benchmark into a new project, with ground-truth labels.
pub fn synth(root: &Path, options: &SynthOptions, params: &SasaParams) -> Result<ProjectStore> {
    let SynthOptions { seed, frames, trajectories } = *options;
    if frames == 0 || trajectories == 0 || frames % trajectories != 0 {
        return Err(ServiceError::InvalidInput(format!(
            "{frames} frames cannot be split evenly into {trajectories} trajectories"
        )));
    }
    let spec = HmmSpec::default();
    let set = generate_set(&spec, trajectories, frames / trajectories, seed)?;
    let topology = set[0].0.topology().clone();
    let pdb = write_pdb(&topology, &spec.templates[0])?;
    let payloads: Vec<Vec<u8>> = set.iter().map(|(t, _)| write_frames(t)).collect();
    let store = ingest(root, &pdb, &payloads, params)?;
    for (i, (_, labels)) in set.iter().enumerate() {
        store.put(&labels_name(i), &format!("labels/{i}.csv"), labels_csv(labels).as_bytes(), &[traj_name(i)])?;
    }
    store.put_json(SYNTH_SPEC, "synth/spec.json", &spec, &[])?;
    Ok(store)
}

/// Offline features of a single trajectory.
#[derive(Debug, Clone)]
pub struct FeatureReport {
    pub features: Vec<PhysicalFeatures>,
    pub res_sasa: Vec<f64>,
    pub rmsf: Option<Vec<f64>>,
    pub graphs: Vec<KnnGraph>,
}

pub fn features(traj: &Trajectory, params: &SasaParams, k: usize) -> Result<FeatureReport> {
    if traj.is_empty() {
        return Err(ServiceError::EmptyTrajectory);
    }
    let (features, res_sasa) = features_and_residue_sasa(traj, params)?;
    let rmsf = if traj.n_frames() >= 2 { Some(rmsf(traj)?) } else { None };
    let graphs = traj.frames().map(|f| knn_graph(f, traj.topology(), k)).collect::<pis_core::Result<_>>()?;
    Ok(FeatureReport { features, res_sasa, rmsf, graphs })
}

/// `metrics.csv`, `residues.csv` and `graphs.csv` under `dir`.
pub fn write_features(report: &FeatureReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let residues = match &report.rmsf {
        Some(r) => residue_csv(&ResidueMetrics { rmsf: r.clone(), res_sasa: report.res_sasa.clone() }),
        None => {
            let mut out = String::from("residue_index,rmsf,res_sasa\n");
            for (i, s) in report.res_sasa.iter().enumerate() {
                out.push_str(&format!("{i},,{s:?}\n"));
            }
            out
        }
    };
    for (name, text) in [("metrics.csv", metrics_csv(&report.features)), ("residues.csv", residues), ("graphs.csv", graph_csv(&report.graphs))] {
        let path = dir.join(name);
        fs::write(&path, text).map_err(io(&path))?;
    }
    Ok(())
}

/// Training data built from the stored trajectories and cached metric series.
pub fn load_dataset(store: &ProjectStore, k: usize) -> Result<Dataset> {
    let trajs = store.trajectories()?;
    let physical = (0..trajs.len())
        .map(|i| Ok(store.get_json::<MetricSeries>(&metrics_name(i))?.0.features()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::with_features(&trajs, k, &physical)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub checkpoint_hash: String,
    pub aborted: Option<String>,
    pub history: Vec<EpochRecord>,
}

/// Runs both training stages and stores the model artifacts.
pub fn train(store: &ProjectStore, config: &TrainConfig, observer: &mut dyn FnMut(&Progress) -> bool) -> Result<TrainReport> {
    config.validate()?;
    let data = load_dataset(store, config.encoder.k)?;
    let outcome = trainer::train(&data, config, observer)?;
    let model = outcome.model;
    let inputs = metric_inputs(store);
    let checkpoint_hash = store.put(CHECKPOINT, "model/checkpoint.bin", &model.checkpoint_bytes(), &inputs)?;
    store.put_json(SIDECAR, "model/sidecar.json", &model.sidecar(), &inputs)?;
    store.put(HISTORY, "model/history.csv", model.log_csv().as_bytes(), &inputs)?;
    Ok(TrainReport { checkpoint_hash, aborted: outcome.aborted, history: model.history })
}

pub fn load_model(store: &ProjectStore) -> Result<Model> {
    if !store.contains(CHECKPOINT) || !store.contains(SIDECAR) {
        return Err(ServiceError::NoModel);
    }
    let bytes = store.get(CHECKPOINT)?.bytes;
    let (sidecar, _) = store.get_json::<Sidecar>(SIDECAR)?;
    Ok(Model::from_parts(&bytes, sidecar)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyzeOptions {
    /// Defaults to the training lag.
    pub ck_lag: Option<usize>,
    pub ck_steps: usize,
    pub fes_bins: usize,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self { ck_lag: None, ck_steps: CK_STEPS, fes_bins: pis_core::vamp::DEFAULT_FES_BINS }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub n_frames: usize,
    pub state_counts: Vec<usize>,
    pub ck_lag: usize,
    pub ck_max_abs_dev: Vec<f64>,
}

/// χ per frame, the free-energy surface, residue contributions and a CK test,
/// all replaced under an exclusive recompute.
pub fn analyze(store: &ProjectStore, options: &AnalyzeOptions) -> Result<AnalysisReport> {
    let model = load_model(store)?;
    let data = load_dataset(store, model.config.encoder.k)?;
    let _guard = store.begin_recompute()?;
    let m = model.config.encoder.n_states;
    let inputs = model_inputs();
    let mut z_rows = Vec::with_capacity(data.n_frames());
    let mut chi_rows = Vec::with_capacity(data.n_frames());
    let mut attention = Vec::with_capacity(data.n_frames());
    let mut chi_trajs = Vec::with_capacity(data.lengths().len());
    let mut state_counts = vec![0; m];
    for (i, (&start, &len)) in data.offsets().iter().zip(data.lengths()).enumerate() {
        let frames: Vec<usize> = (start..start + len).collect();
        let (z, chi) = model.embed(&data, &frames)?;
        attention.extend(model.attention(&data, &frames)?);
        let probabilities = to_rows(&chi);
        let states: Vec<usize> = probabilities.iter().map(|p| pis_core::encoder::classify(p)).collect();
        for &s in &states {
            state_counts[s] += 1;
        }
        store.put_json(&states_name(i), &format!("states/{i}.json"), &StateAssignments { states, probabilities: probabilities.clone() }, &inputs)?;
        z_rows.extend(to_rows(&z));
        chi_rows.extend(probabilities);
        chi_trajs.push(chi);
    }
    let fes = free_energy_surface(&z_rows, options.fes_bins)?;
    store.put_json(FES, "fes.json", &fes, &inputs)?;
    let contributions = residue_contributions(&attention, &chi_rows)?;
    store.put_json(CONTRIBUTIONS, "contributions.json", &contributions, &inputs)?;
    let lag = options.ck_lag.unwrap_or(model.config.lag);
    let results = ck_test(&chi_trajs, lag, options.ck_steps)?;
    let ck_max_abs_dev = results.iter().map(|r| r.max_abs_dev).collect();
    store.put_json(CKTEST, "cktest.json", &CkArtifact { lag, steps: options.ck_steps, results }, &inputs)?;
    Ok(AnalysisReport { n_frames: data.n_frames(), state_counts, ck_lag: lag, ck_max_abs_dev })
}

pub fn states(store: &ProjectStore, id: usize) -> Result<(StateAssignments, String)> {
    if id >= store.n_trajectories() {
        return Err(ServiceError::NotFound(format!("trajectory {id}")));
    }
    store.get_json(&states_name(id))
}

pub fn fes(store: &ProjectStore) -> Result<(FreeEnergySurface, String)> {
    store.get_json(FES)
}

/// CK test recomputed from the stored assignments; the hash covers every
/// assignment artifact it read.
pub fn ck_from_states(store: &ProjectStore, lag: usize, steps: usize) -> Result<(Vec<CkTestResult>, String)> {
    let mut chi = Vec::with_capacity(store.n_trajectories());
    let mut hashes = String::new();
    for i in 0..store.n_trajectories() {
        let (a, h) = states(store, i)?;
        hashes.push_str(&h);
        if !a.probabilities.is_empty() {
            chi.push(from_rows(&a.probabilities)?);
        }
    }
    Ok((ck_test(&chi, lag, steps)?, sha256_hex(hashes.as_bytes())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidueView {
    pub rmsf: Option<Vec<f64>>,
    pub res_sasa: Vec<f64>,
    pub contributions: Option<ResidueContribution>,
}

/// Physical residue summaries plus contributions once a model has been analysed.
pub fn residues(store: &ProjectStore) -> Result<(ResidueView, String)> {
    let (summary, hash) = store.get_json::<ResidueSummary>(RESIDUES)?;
    let (contributions, hash) = if store.contains(CONTRIBUTIONS) {
        let (c, h) = store.get_json::<ResidueContribution>(CONTRIBUTIONS)?;
        (Some(c), sha256_hex(format!("{hash}{h}").as_bytes()))
    } else {
        (None, hash)
    };
    Ok((ResidueView { rmsf: summary.rmsf, res_sasa: summary.res_sasa, contributions }, hash))
}

pub fn metrics(store: &ProjectStore, id: usize) -> Result<(MetricSeries, String)> {
    if id >= store.n_trajectories() {
        return Err(ServiceError::NotFound(format!("trajectory {id}")));
    }
    store.get_json(&metrics_name(id))
}
