use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use pis_core::graph::DEFAULT_K;
use pis_core::physchem::SasaParams;
use pis_core::trainer::Progress;
use pis_core::trajectory::pdb::parse_topology;
use pis_core::trajectory::pistrj::read_frames;
use pis_service::api::{self, config_from_patch, AppState};
use pis_service::error::ServiceError;
use pis_service::pipeline::{self, AnalyzeOptions, SynthOptions};
use pis_service::store::ROOT_ENV;
use pis_service::{json, ProjectStore, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "pis", version, about = "Physics-informed state partitioning of protein trajectories")]
struct Cli {
    /// Project directory.
    #[arg(long, global = true, env = ROOT_ENV, default_value = ".")]
    root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a project from a PDB topology and PISTRJ trajectories and precompute Rg/SASA.
    Ingest {
        #[arg(long)]
        topology: PathBuf,
        /// Repeat for several trajectories.
        #[arg(long = "traj", required = true)]
        trajectories: Vec<PathBuf>,
        #[arg(long, default_value_t = 960)]
        sasa_points: usize,
    },
    /// Rg, SASA, RMSF and residue graphs of one trajectory, written as CSV.
    Features {
        #[arg(long)]
        topology: PathBuf,
        #[arg(long = "traj")]
        trajectory: PathBuf,
        #[arg(long, default_value = "features")]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = 960)]
        sasa_points: usize,
    },
    /// Generate the synthetic benchmark as a new project.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20_000)]
        frames: usize,
        #[arg(long, default_value_t = 4)]
        trajectories: usize,
        #[arg(long, default_value_t = 960)]
        sasa_points: usize,
    },
    /// Run both training stages and store the model.
    Train {
        /// JSON file with any subset of the training configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        lag: Option<usize>,
        #[arg(long)]
        epochs_stage1: Option<usize>,
        #[arg(long)]
        epochs_stage2: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// No per-epoch progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// State assignments, free-energy surface, CK test and residue contributions.
    Analyze {
        /// Defaults to the training lag.
        #[arg(long)]
        ck_lag: Option<usize>,
        #[arg(long, default_value_t = pipeline::CK_STEPS)]
        ck_steps: usize,
        #[arg(long, default_value_t = pis_core::vamp::DEFAULT_FES_BINS)]
        bins: usize,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| ServiceError::Io { path: path.display().to_string(), source })
}

fn sasa(points: usize) -> Result<SasaParams> {
    let params = SasaParams { n_sphere_points: points, ..SasaParams::default() };
    params.validate()?;
    Ok(params)
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", json::to_string(value)?);
    Ok(())
}

#[derive(Serialize)]
struct ProjectSummary {
    root: String,
    n_trajectories: usize,
    n_frames_total: usize,
}

fn summary(store: &ProjectStore) -> Result<ProjectSummary> {
    let (manifest, _) = store.manifest()?;
    Ok(ProjectSummary {
        root: store.root().display().to_string(),
        n_trajectories: manifest.totals.n_trajectories,
        n_frames_total: manifest.totals.n_frames_total,
    })
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.root;
    match cli.command {
        Command::Ingest { topology, trajectories, sasa_points } => {
            let text = String::from_utf8(read(&topology)?).map_err(|e| ServiceError::InvalidInput(format!("topology: {e}")))?;
            let payloads = trajectories.iter().map(|p| read(p)).collect::<Result<Vec<_>>>()?;
            let store = pipeline::ingest(&root, &text, &payloads, &sasa(sasa_points)?)?;
            print(&summary(&store)?)
        }
        Command::Features { topology, trajectory, out, k, sasa_points } => {
            let text = String::from_utf8(read(&topology)?).map_err(|e| ServiceError::InvalidInput(format!("topology: {e}")))?;
            let top = Arc::new(parse_topology(&text)?);
            let traj = read_frames(&read(&trajectory)?, top)?;
            let report = pipeline::features(&traj, &sasa(sasa_points)?, k)?;
            pipeline::write_features(&report, &out)?;
            print(&serde_json::json!({ "n_frames": traj.n_frames(), "out": out.display().to_string() }))
        }
        Command::Synth { seed, frames, trajectories, sasa_points } => {
            let store = pipeline::synth(&root, &SynthOptions { seed, frames, trajectories }, &sasa(sasa_points)?)?;
            print(&summary(&store)?)
        }
        Command::Train { config, lag, epochs_stage1, epochs_stage2, seed, quiet } => {
            let mut patch = match &config {
                Some(path) => serde_json::from_slice(&read(path)?)?,
                None => serde_json::json!({}),
            };
            for (key, value) in [("lag", lag.map(|v| v as u64)), ("epochs_stage1", epochs_stage1.map(|v| v as u64)), ("epochs_stage2", epochs_stage2.map(|v| v as u64)), ("seed", seed)] {
                if let Some(v) = value {
                    patch[key] = v.into();
                }
            }
            let config = config_from_patch(&serde_json::to_vec(&patch)?)?;
            let store = ProjectStore::open(&root)?;
            let mut observer = |p: &Progress| {
                if !quiet {
                    eprintln!("{} epoch {}/{} train={:.6} val={:.6}", p.stage.as_str(), p.epoch, p.epochs, p.train_score, p.val_score);
                }
                true
            };
            let report = pipeline::train(&store, &config, &mut observer)?;
            print(&report)
        }
        Command::Analyze { ck_lag, ck_steps, bins } => {
            let store = ProjectStore::open(&root)?;
            let report = pipeline::analyze(&store, &AnalyzeOptions { ck_lag, ck_steps, fes_bins: bins })?;
            print(&report)
        }
        Command::Serve { addr } => {
            let store = Arc::new(ProjectStore::open(&root)?);
            let runtime = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|source| ServiceError::Io { path: "runtime".into(), source })?;
            runtime.block_on(async {
                let listener = tokio::net::TcpListener::bind(&addr)
                    .await
                    .map_err(|source| ServiceError::Io { path: addr.clone(), source })?;
                let local = listener.local_addr().map_err(|source| ServiceError::Io { path: addr.clone(), source })?;
                println!("listening on http://{local}");
                std::io::stdout().flush().ok();
                api::serve(listener, AppState::new(store))
                    .await
                    .map_err(|source| ServiceError::Io { path: local.to_string(), source })
            })
        }
    }
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", one_line(first));
            return ExitCode::FAILURE;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
