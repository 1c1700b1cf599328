mod common;

use std::io::{BufRead, BufReader};
use std::net::SocketAddr;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use common::get;
use pis_core::trajectory::pistrj::slice_frames;
use tempfile::TempDir;

fn pis(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pis")).env("PIS_PROJECT_ROOT", root).args(args).output().unwrap()
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn assert_fails_with(out: &Output, needle: &str) {
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains(needle), "{err}");
}

fn synth(root: &Path) {
    let out = pis(root, &["synth", "--seed", "3", "--frames", "120", "--trajectories", "2", "--sasa-points", "240"]);
    let summary = stdout_json(&out);
    assert_eq!(summary["n_trajectories"], 2);
    assert_eq!(summary["n_frames_total"], 120);
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn serve(root: &Path) -> (Server, SocketAddr) {
    let mut child = Command::new(env!("CARGO_BIN_EXE_pis"))
        .args(["serve", "--addr", "127.0.0.1:0", "--root"])
        .arg(root)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").unwrap_or_else(|| panic!("{line}")).parse().unwrap();
    (Server(child), addr)
}

#[test]
fn synth_train_analyze() {
    let dir = TempDir::new().unwrap();
    let root = dir.path();
    synth(root);
    assert_fails_with(&pis(root, &["analyze"]), "no model");

    let config = root.join("config.json");
    std::fs::write(&config, r#"{"batch_size": 64, "warmup_epochs": 1, "validation_fraction": 0.5, "encoder": {"d_h": 8, "n_layers": 2}}"#).unwrap();
    let trained = stdout_json(&pis(
        root,
        &["train", "--quiet", "--config", config.to_str().unwrap(), "--lag", "1", "--epochs-stage1", "2", "--epochs-stage2", "1"],
    ));
    assert_eq!(trained["history"].as_array().unwrap().len(), 3);
    assert!(trained["checkpoint_hash"].as_str().unwrap().len() == 64);

    let analysed = stdout_json(&pis(root, &["analyze", "--ck-lag", "2", "--ck-steps", "3", "--bins", "16"]));
    assert_eq!(analysed["n_frames"], 120);
    assert_eq!(analysed["ck_lag"], 2);
    let counts: u64 = analysed["state_counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum();
    assert_eq!(counts, 120);
    assert_eq!(analysed["ck_max_abs_dev"][0], 0.0);
}

#[test]
fn served_metrics_match_the_features_command() {
    let dir = TempDir::new().unwrap();
    let root = dir.path();
    synth(root);
    let out_dir = root.join("offline");
    let report = stdout_json(&pis(
        root,
        &[
            "features",
            "--topology",
            root.join("topology.pdb").to_str().unwrap(),
            "--traj",
            root.join("traj/1.pistrj").to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--sasa-points",
            "240",
        ],
    ));
    assert_eq!(report["n_frames"], 60);
    let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv.lines().skip(1).map(|l| l.split(',').skip(1).map(|x| x.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 60);
    for name in ["residues.csv", "graphs.csv"] {
        assert!(out_dir.join(name).exists());
    }

    let (_server, addr) = serve(root);
    for (series, column) in [("rg", 0), ("sasa", 1)] {
        let served: Vec<f64> = serde_json::from_slice(&get(addr, &format!("/api/traj/1/metrics?series={series}")).body).unwrap();
        let offline: Vec<f64> = rows.iter().map(|r| r[column]).collect();
        assert_eq!(served.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), offline.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn ingest_copies_external_files() {
    let dir = TempDir::new().unwrap();
    let source = dir.path().join("source");
    synth(&source);
    let target = dir.path().join("target");
    let topology = source.join("topology.pdb");
    let summary = stdout_json(&pis(
        &target,
        &[
            "ingest",
            "--topology",
            topology.to_str().unwrap(),
            "--traj",
            source.join("traj/0.pistrj").to_str().unwrap(),
            "--traj",
            source.join("traj/1.pistrj").to_str().unwrap(),
            "--sasa-points",
            "240",
        ],
    ));
    assert_eq!(summary["n_frames_total"], 120);
    assert_eq!(std::fs::read(target.join("traj/1.pistrj")).unwrap(), std::fs::read(source.join("traj/1.pistrj")).unwrap());
    assert_eq!(
        std::fs::read(target.join("metrics/0.json")).unwrap(),
        std::fs::read(source.join("metrics/0.json")).unwrap()
    );
    assert_fails_with(&pis(&target, &["synth", "--frames", "10", "--trajectories", "1"]), "already exists");
}

#[test]
fn empty_trajectories_are_rejected() {
    let dir = TempDir::new().unwrap();
    let root = dir.path();
    synth(root);
    let empty = root.join("empty.pistrj");
    std::fs::write(&empty, slice_frames(&std::fs::read(root.join("traj/0.pistrj")).unwrap(), 0, 0).unwrap()).unwrap();
    let topology = root.join("topology.pdb");
    let out = pis(root, &["features", "--topology", topology.to_str().unwrap(), "--traj", empty.to_str().unwrap()]);
    assert_fails_with(&out, "empty trajectory");
}

#[test]
fn errors_are_one_line_with_status_one() {
    let dir = TempDir::new().unwrap();
    assert_fails_with(&pis(dir.path(), &["train"]), "project.json");
    assert_fails_with(&pis(dir.path(), &["frobnicate"]), "frobnicate");
    assert_fails_with(&pis(dir.path(), &["synth", "--frames", "not-a-number"]), "not-a-number");
    assert_fails_with(&pis(dir.path(), &["synth", "--frames", "7", "--trajectories", "2"]), "");
    let help = pis(dir.path(), &["--help"]);
    assert!(help.status.success());
    assert!(String::from_utf8_lossy(&help.stdout).contains("serve"));
}
