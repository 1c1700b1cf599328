mod common;

use std::net::SocketAddr;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use common::{analysed_project, fast_sasa, get, request, small_project, spawn_server};
use pis_core::trajectory::pistrj::{read_header, HEADER_LEN};
use pis_service::pipeline;
use pis_service::store::{metrics_name, HASH_HEADER};
use pis_service::ProjectStore;
use tempfile::TempDir;

struct Shared {
    _dir: TempDir,
    store: Arc<ProjectStore>,
    addr: SocketAddr,
}

/// One analysed project served for the read-only tests.
fn shared() -> &'static Shared {
    static SHARED: OnceLock<Shared> = OnceLock::new();
    SHARED.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let store = Arc::new(analysed_project(dir.path()));
        let (addr, _) = spawn_server(store.clone());
        Shared { _dir: dir, store, addr }
    })
}

fn numbers(v: &serde_json::Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[test]
fn manifest_is_versioned() {
    let s = shared();
    let r = get(s.addr, "/api/manifest");
    assert_eq!(r.status, 200);
    let body = r.json();
    assert_eq!(body["hash"].as_str(), r.header(HASH_HEADER));
    assert_eq!(Some(body["hash"].as_str().unwrap().to_string()), s.store.hash("manifest"));
    assert_eq!(body["manifest"]["totals"]["n_frames_total"].as_u64(), Some(200));
    assert_eq!(body["manifest"]["entries"].as_array().unwrap().len(), 2);
    assert_eq!(body["n_atoms"].as_u64().unwrap() as usize, s.store.topology().unwrap().n_atoms());
}

#[test]
fn frame_slices_are_bit_exact() {
    let s = shared();
    let stored = std::fs::read(s.store.path_of("traj/1").unwrap()).unwrap();
    let header = read_header(&stored).unwrap();
    let frame_len = header.n_atoms as usize * 12;
    for (start, count) in [(0, 1), (3, 5), (0, 100), (97, 3), (50, 1000), (100, 0)] {
        let r = get(s.addr, &format!("/api/traj/1/frames?start={start}&count={count}"));
        assert_eq!(r.status, 200, "{start}+{count}");
        assert_eq!(r.header("content-type"), Some("application/octet-stream"));
        assert_eq!(r.header(HASH_HEADER), s.store.hash("traj/1").as_deref());
        let served = read_header(&r.body).unwrap();
        let n = count.min(100 - start);
        assert_eq!(served.n_frames as usize, n);
        let begin = HEADER_LEN + start * frame_len;
        assert_eq!(&r.body[HEADER_LEN..], &stored[begin..begin + n * frame_len]);
    }
    let whole = get(s.addr, "/api/traj/0/frames");
    assert_eq!(whole.body, std::fs::read(s.store.path_of("traj/0").unwrap()).unwrap());
    assert_eq!(get(s.addr, "/api/traj/0/frames?start=101").status, 400);
}

#[test]
fn unknown_trajectories_are_not_found() {
    let s = shared();
    for path in ["/api/traj/2/frames", "/api/traj/x/metrics?series=rg", "/api/traj/9/states", "/api/nothing"] {
        assert_eq!(get(s.addr, path).status, 404, "{path}");
    }
}

#[test]
fn served_metrics_match_offline_features() {
    let s = shared();
    let traj = s.store.trajectory(0).unwrap();
    let offline = pipeline::features(&traj, &fast_sasa(), 10).unwrap();
    for (series, pick) in [("rg", 0usize), ("sasa", 1)] {
        let r = get(s.addr, &format!("/api/traj/0/metrics?series={series}"));
        assert_eq!(r.status, 200);
        assert_eq!(r.header(HASH_HEADER), s.store.hash(&metrics_name(0)).as_deref());
        let served = numbers(&r.json());
        assert_eq!(served.len(), 100);
        for (got, f) in served.iter().zip(&offline.features) {
            let want = if pick == 0 { f.rg } else { f.sasa_total };
            assert!(*got > 0.0);
            assert_eq!(got.to_bits(), want.to_bits());
        }
    }
    assert_eq!(get(s.addr, "/api/traj/0/metrics?series=volume").status, 400);
}

#[test]
fn floats_are_written_with_seventeen_digits() {
    let s = shared();
    let text = get(s.addr, "/api/traj/1/metrics?series=sasa").text();
    let first = text.trim_start_matches('[').split(',').next().unwrap();
    let mantissa = first.split('e').next().unwrap();
    assert_eq!(mantissa.replace('.', "").trim_start_matches('-').len(), 17, "{first}");
}

#[test]
fn state_assignments_cover_every_frame() {
    let s = shared();
    for id in 0..2 {
        let r = get(s.addr, &format!("/api/traj/{id}/states"));
        assert_eq!(r.status, 200);
        let body = r.json();
        assert_eq!(body["hash"].as_str(), r.header(HASH_HEADER));
        let states = body["states"].as_array().unwrap();
        let probs = body["probabilities"].as_array().unwrap();
        assert_eq!(states.len(), 100);
        for (state, row) in states.iter().zip(probs) {
            let row = numbers(row);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(state.as_u64().unwrap() as usize, argmax);
        }
    }
}

#[test]
fn single_step_ck_prediction_equals_the_estimate() {
    let s = shared();
    let r = get(s.addr, "/api/cktest?lag=5&n=1");
    assert_eq!(r.status, 200);
    let body = r.json();
    assert_eq!(body["lag"], 5);
    let result = &body["results"][0];
    assert_eq!(result["predicted"], result["estimated"]);
    let default = get(s.addr, "/api/cktest").json();
    assert_eq!(default["steps"], 5);
    assert_eq!(default["lag"], 1);
    assert_eq!(get(s.addr, "/api/cktest?lag=200&n=5").status, 400);
}

#[test]
fn fes_and_residues_are_served() {
    let s = shared();
    let fes = get(s.addr, "/api/fes");
    assert_eq!(fes.status, 200);
    assert_eq!(fes.json()["hash"].as_str(), s.store.hash(pipeline::FES).as_deref());
    let res = get(s.addr, "/api/residues");
    assert_eq!(res.status, 200);
    let body = res.json();
    let n_res = s.store.topology().unwrap().residues().len();
    assert_eq!(body["rmsf"].as_array().unwrap().len(), n_res);
    assert_eq!(body["res_sasa"].as_array().unwrap().len(), n_res);
    assert!(body["contributions"].is_object());
}

#[test]
fn status_is_idle_before_any_training() {
    let dir = TempDir::new().unwrap();
    let (addr, _) = spawn_server(Arc::new(small_project(dir.path())));
    let r = get(addr, "/api/train/status");
    assert_eq!(r.status, 200);
    assert_eq!(r.json()["stage"], "idle");
    assert_eq!(get(addr, "/api/fes").status, 404);
    assert_eq!(get(addr, "/api/cktest").status, 404);
}

#[test]
fn tampered_artifacts_are_stale() {
    let dir = TempDir::new().unwrap();
    let store = Arc::new(analysed_project(dir.path()));
    let (addr, _) = spawn_server(store.clone());
    let path = store.path_of(&metrics_name(1)).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.push(b' ');
    std::fs::write(&path, bytes).unwrap();
    assert_eq!(get(addr, "/api/traj/1/metrics?series=rg").status, 409);
    assert_eq!(get(addr, "/api/traj/0/metrics?series=rg").status, 200);

    store.put_json(pipeline::CHECKPOINT, "model/checkpoint.bin", &[1, 2, 3], &[]).unwrap();
    let r = get(addr, "/api/traj/0/states");
    assert_eq!(r.status, 409);
    assert!(r.json()["error"].as_str().unwrap().contains("stale"));
}

#[test]
fn derived_views_are_unavailable_during_recompute() {
    let dir = TempDir::new().unwrap();
    let store = Arc::new(analysed_project(dir.path()));
    let (addr, _) = spawn_server(store.clone());
    let guard = store.begin_recompute().unwrap();
    for path in ["/api/fes", "/api/cktest", "/api/residues", "/api/traj/0/states"] {
        assert_eq!(get(addr, path).status, 503, "{path}");
    }
    assert_eq!(get(addr, "/api/manifest").status, 200);
    drop(guard);
    assert_eq!(get(addr, "/api/fes").status, 200);
}

#[test]
fn training_requests_are_idempotent() {
    let dir = TempDir::new().unwrap();
    let store = Arc::new(small_project(dir.path()));
    let (addr, state) = spawn_server(store.clone());
    let patch = br#"{"lag": 1, "batch_size": 64, "epochs_stage1": 3, "epochs_stage2": 2, "warmup_epochs": 1,
                     "validation_fraction": 0.5, "encoder": {"d_h": 8, "n_layers": 2}}"#;
    let first = request(addr, "POST", "/api/train", patch);
    assert_eq!(first.status, 202);
    let job = first.json()["job_id"].as_str().unwrap().to_string();
    let again = request(addr, "POST", "/api/train", patch);
    assert_eq!(again.status, 200);
    assert_eq!(again.json()["job_id"].as_str(), Some(job.as_str()));
    assert_eq!(again.json()["started"], false);

    let deadline = Instant::now() + Duration::from_secs(300);
    let status = loop {
        let status = get(addr, "/api/train/status").json();
        if status["stage"] == "done" || status["stage"] == "failed" {
            break status;
        }
        assert!(Instant::now() < deadline, "training did not finish: {status}");
        std::thread::sleep(Duration::from_millis(100));
    };
    assert_eq!(status["stage"], "done", "{status}");
    assert_eq!(status["job_id"].as_str(), Some(job.as_str()));
    assert_eq!(status["checkpoint_hash"].as_str(), store.hash(pipeline::CHECKPOINT).as_deref());
    assert_eq!(state.status().stage, "done");
    assert_eq!(get(addr, "/api/traj/0/states").status, 200);

    assert_eq!(request(addr, "POST", "/api/train", br#"{"lag": 0}"#).status, 400);
    assert_eq!(request(addr, "POST", "/api/train", b"{").status, 400);
}
