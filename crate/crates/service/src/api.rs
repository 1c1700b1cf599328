//! HTTP API consumed by the web console.

use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use pis_core::trainer::{Progress, Sidecar, TrainConfig};
use pis_core::trajectory::pistrj::{read_header, slice_frames};
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;
use crate::json;
use crate::pipeline::{self, AnalyzeOptions, CK_STEPS, SIDECAR};
use crate::store::{traj_name, ProjectStore, HASH_HEADER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStatus {
    pub job_id: Option<String>,
    /// `idle`, `stage1`, `stage2`, `analyzing`, `done` or `failed`.
    pub stage: String,
    pub epoch: usize,
    pub epochs: usize,
    pub train_score: Option<f64>,
    pub val_score: Option<f64>,
    pub error: Option<String>,
    pub checkpoint_hash: Option<String>,
}

impl TrainStatus {
    fn idle() -> Self {
        Self {
            job_id: None,
            stage: "idle".into(),
            epoch: 0,
            epochs: 0,
            train_score: None,
            val_score: None,
            error: None,
            checkpoint_hash: None,
        }
    }
}

#[derive(Debug)]
struct Job {
    issued: u64,
    running: bool,
    status: TrainStatus,
}

#[derive(Debug)]
pub struct AppState {
    pub store: Arc<ProjectStore>,
    job: Mutex<Job>,
}

impl AppState {
    pub fn new(store: Arc<ProjectStore>) -> Arc<Self> {
        Arc::new(Self { store, job: Mutex::new(Job { issued: 0, running: false, status: TrainStatus::idle() }) })
    }

    pub fn status(&self) -> TrainStatus {
        self.job.lock().expect("job lock").status.clone()
    }

    fn update(&self, f: impl FnOnce(&mut TrainStatus)) {
        f(&mut self.job.lock().expect("job lock").status);
    }
}

pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        Self(e)
    }
}

impl From<pis_core::Error> for ApiError {
    fn from(e: pis_core::Error) -> Self {
        Self(e.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            ServiceError::NotFound(_) | ServiceError::NoModel => StatusCode::NOT_FOUND,
            ServiceError::Stale(_) => StatusCode::CONFLICT,
            ServiceError::Busy => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::InvalidInput(_) | ServiceError::EmptyTrajectory | ServiceError::Json(_) => StatusCode::BAD_REQUEST,
            ServiceError::Core(pis_core::Error::InvalidInput(_) | pis_core::Error::Shape(_)) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = serde_json::json!({ "error": self.0.to_string() });
        (status, [(header::CONTENT_TYPE, "application/json")], body.to_string()).into_response()
    }
}

type ApiResult = std::result::Result<Response, ApiError>;

#[derive(Serialize)]
struct Versioned<'a, T: Serialize> {
    hash: &'a str,
    #[serde(flatten)]
    data: &'a T,
}

fn with_hash(status: StatusCode, hash: &str, content_type: &'static str, body: Vec<u8>) -> Response {
    let mut r = (status, [(header::CONTENT_TYPE, content_type)], body).into_response();
    if let Ok(v) = HeaderValue::from_str(hash) {
        r.headers_mut().insert(HASH_HEADER, v);
    }
    r
}

fn json_response<T: Serialize + ?Sized>(status: StatusCode, hash: &str, body: &T) -> ApiResult {
    Ok(with_hash(status, hash, "application/json", json::to_vec(body)?))
}

fn versioned<T: Serialize>(hash: &str, data: &T) -> ApiResult {
    json_response(StatusCode::OK, hash, &Versioned { hash, data })
}

fn traj_id(store: &ProjectStore, raw: &str) -> Result<usize, ApiError> {
    match raw.parse::<usize>() {
        Ok(id) if id < store.n_trajectories() => Ok(id),
        _ => Err(ServiceError::NotFound(format!("trajectory {raw}")).into()),
    }
}

fn not_recomputing(store: &ProjectStore) -> Result<(), ApiError> {
    if store.is_recomputing() {
        return Err(ServiceError::Busy.into());
    }
    Ok(())
}

#[derive(Serialize)]
struct ManifestBody {
    manifest: pis_core::trajectory::DatasetManifest,
    dt_ps: f64,
    n_atoms: usize,
    residues: Vec<String>,
}

async fn manifest(State(app): State<Arc<AppState>>) -> ApiResult {
    let (manifest, hash) = app.store.manifest()?;
    let top = app.store.topology()?;
    let residues = top.residues().iter().map(|r| r.name.clone()).collect();
    versioned(&hash, &ManifestBody { manifest, dt_ps: app.store.dt_ps(), n_atoms: top.n_atoms(), residues })
}

#[derive(Deserialize)]
struct FrameQuery {
    start: Option<usize>,
    count: Option<usize>,
}

async fn frames(State(app): State<Arc<AppState>>, Path(id): Path<String>, Query(q): Query<FrameQuery>) -> ApiResult {
    let id = traj_id(&app.store, &id)?;
    let artifact = app.store.get(&traj_name(id))?;
    let n_frames = read_header(&artifact.bytes)?.n_frames as usize;
    let start = q.start.unwrap_or(0);
    let count = q.count.unwrap_or(n_frames.saturating_sub(start));
    let slice = slice_frames(&artifact.bytes, start, count)?;
    Ok(with_hash(StatusCode::OK, &artifact.hash, "application/octet-stream", slice))
}

#[derive(Deserialize)]
struct MetricQuery {
    series: String,
}

async fn metrics(State(app): State<Arc<AppState>>, Path(id): Path<String>, Query(q): Query<MetricQuery>) -> ApiResult {
    let id = traj_id(&app.store, &id)?;
    let (series, hash) = pipeline::metrics(&app.store, id)?;
    let values = match q.series.as_str() {
        "rg" => series.rg,
        "sasa" => series.sasa,
        other => return Err(ServiceError::InvalidInput(format!("unknown series '{other}', expected rg or sasa")).into()),
    };
    json_response(StatusCode::OK, &hash, &values)
}

async fn states(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    let id = traj_id(&app.store, &id)?;
    not_recomputing(&app.store)?;
    let (a, hash) = pipeline::states(&app.store, id)?;
    versioned(&hash, &a)
}

async fn fes(State(app): State<Arc<AppState>>) -> ApiResult {
    not_recomputing(&app.store)?;
    let (f, hash) = pipeline::fes(&app.store)?;
    versioned(&hash, &f)
}

#[derive(Deserialize)]
struct CkQuery {
    lag: Option<usize>,
    n: Option<usize>,
}

#[derive(Serialize)]
struct CkBody {
    lag: usize,
    steps: usize,
    results: Vec<pis_core::vamp::CkTestResult>,
}

async fn cktest(State(app): State<Arc<AppState>>, Query(q): Query<CkQuery>) -> ApiResult {
    not_recomputing(&app.store)?;
    let lag = match q.lag {
        Some(lag) => lag,
        None => app.store.get_json::<Sidecar>(SIDECAR).map_err(|_| ServiceError::NoModel)?.0.config.lag,
    };
    let steps = q.n.unwrap_or(CK_STEPS);
    let (results, hash) = pipeline::ck_from_states(&app.store, lag, steps)?;
    versioned(&hash, &CkBody { lag, steps, results })
}

async fn residues(State(app): State<Arc<AppState>>) -> ApiResult {
    not_recomputing(&app.store)?;
    let (view, hash) = pipeline::residues(&app.store)?;
    versioned(&hash, &view)
}

#[derive(Serialize)]
struct TrainStarted {
    job_id: String,
    started: bool,
}

/// The request body, if any, is a partial training configuration laid over the defaults.
pub fn config_from_patch(body: &[u8]) -> crate::error::Result<TrainConfig> {
    let mut value = serde_json::to_value(TrainConfig::default())?;
    if !body.iter().all(u8::is_ascii_whitespace) {
        json::merge(&mut value, serde_json::from_slice(body)?);
    }
    let config: TrainConfig = serde_json::from_value(value)?;
    config.validate()?;
    Ok(config)
}

fn run_job(app: Arc<AppState>, config: TrainConfig) {
    let mut observer = |p: &Progress| {
        app.update(|s| {
            s.stage = p.stage.as_str().into();
            s.epoch = p.epoch;
            s.epochs = p.epochs;
            s.train_score = Some(p.train_score);
            s.val_score = Some(p.val_score);
        });
        true
    };
    let result = pipeline::train(&app.store, &config, &mut observer).and_then(|report| {
        app.update(|s| {
            s.stage = "analyzing".into();
            s.checkpoint_hash = Some(report.checkpoint_hash.clone());
            s.error = report.aborted.clone();
        });
        pipeline::analyze(&app.store, &AnalyzeOptions::default())
    });
    let mut job = app.job.lock().expect("job lock");
    match result {
        Ok(_) => job.status.stage = "done".into(),
        Err(e) => {
            job.status.stage = "failed".into();
            job.status.error = Some(e.to_string());
        }
    }
    job.running = false;
}

async fn start_training(State(app): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let config = config_from_patch(&body)?;
    let mut job = app.job.lock().expect("job lock");
    if job.running {
        let id = job.status.job_id.clone().unwrap_or_default();
        return json_response(StatusCode::OK, &id, &TrainStarted { job_id: id.clone(), started: false });
    }
    job.issued += 1;
    let id = format!("job-{}", job.issued);
    job.running = true;
    job.status = TrainStatus { job_id: Some(id.clone()), stage: "stage1".into(), ..TrainStatus::idle() };
    drop(job);
    let worker = app.clone();
    std::thread::spawn(move || run_job(worker, config));
    json_response(StatusCode::ACCEPTED, &id, &TrainStarted { job_id: id.clone(), started: true })
}

async fn train_status(State(app): State<Arc<AppState>>) -> ApiResult {
    let status = app.status();
    let hash = status.checkpoint_hash.clone().unwrap_or_default();
    json_response(StatusCode::OK, &hash, &status)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/manifest", get(manifest))
        .route("/api/traj/{id}/frames", get(frames))
        .route("/api/traj/{id}/metrics", get(metrics))
        .route("/api/traj/{id}/states", get(states))
        .route("/api/fes", get(fes))
        .route("/api/cktest", get(cktest))
        .route("/api/residues", get(residues))
        .route("/api/train", axum::routing::post(start_training))
        .route("/api/train/status", get(train_status))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
