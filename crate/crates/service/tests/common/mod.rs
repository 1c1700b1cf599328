#![allow(dead_code)]

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::Path;
use std::sync::Arc;

use pis_core::physchem::SasaParams;
use pis_core::trainer::TrainConfig;
use pis_service::api::{self, config_from_patch, AppState};
use pis_service::pipeline::{self, AnalyzeOptions, SynthOptions};
use pis_service::ProjectStore;

pub struct Reply {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }

    pub fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }

    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }
}

fn dechunk(mut raw: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    loop {
        let end = raw.windows(2).position(|w| w == b"\r\n").expect("chunk size line");
        let size = usize::from_str_radix(std::str::from_utf8(&raw[..end]).unwrap().trim(), 16).unwrap();
        raw = &raw[end + 2..];
        if size == 0 {
            return out;
        }
        out.extend_from_slice(&raw[..size]);
        raw = &raw[size + 2..];
    }
}

/// One HTTP/1.1 exchange over a fresh connection.
pub fn request(addr: SocketAddr, method: &str, path: &str, body: &[u8]) -> Reply {
    let mut stream = TcpStream::connect(addr).unwrap();
    let head = format!(
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n",
        body.len()
    );
    stream.write_all(head.as_bytes()).unwrap();
    stream.write_all(body).unwrap();
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw).unwrap();
    let split = raw.windows(4).position(|w| w == b"\r\n\r\n").expect("header terminator");
    let head = std::str::from_utf8(&raw[..split]).unwrap();
    let mut lines = head.lines();
    let status = lines.next().unwrap().split_whitespace().nth(1).unwrap().parse().unwrap();
    let headers: Vec<(String, String)> = lines
        .filter_map(|l| l.split_once(':'))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect();
    let rest = &raw[split + 4..];
    let chunked = headers.iter().any(|(k, v)| k.eq_ignore_ascii_case("transfer-encoding") && v.contains("chunked"));
    Reply { status, body: if chunked { dechunk(rest) } else { rest.to_vec() }, headers }
}

pub fn get(addr: SocketAddr, path: &str) -> Reply {
    request(addr, "GET", path, b"")
}

/// Serves `store` on an ephemeral port from a background runtime.
pub fn spawn_server(store: Arc<ProjectStore>) -> (SocketAddr, Arc<AppState>) {
    let state = AppState::new(store);
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let addr = listener.local_addr().unwrap();
    let served = state.clone();
    std::thread::spawn(move || {
        let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
        runtime.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).unwrap();
            api::serve(listener, served).await.unwrap();
        });
    });
    (addr, state)
}

pub fn small_config() -> TrainConfig {
    config_from_patch(
        br#"{"lag": 1, "batch_size": 64, "epochs_stage1": 2, "epochs_stage2": 2, "warmup_epochs": 1,
             "validation_fraction": 0.5, "encoder": {"d_h": 8, "n_layers": 2}}"#,
    )
    .unwrap()
}

pub fn fast_sasa() -> SasaParams {
    SasaParams { n_sphere_points: 240, ..SasaParams::default() }
}

/// Synthetic project of two 100-frame trajectories.
pub fn small_project(root: &Path) -> ProjectStore {
    pipeline::synth(root, &SynthOptions { seed: 11, frames: 200, trajectories: 2 }, &fast_sasa()).unwrap()
}

/// Small project with a trained and analysed model.
pub fn analysed_project(root: &Path) -> ProjectStore {
    let store = small_project(root);
    pipeline::train(&store, &small_config(), &mut |_| true).unwrap();
    pipeline::analyze(&store, &AnalyzeOptions::default()).unwrap();
    store
}
