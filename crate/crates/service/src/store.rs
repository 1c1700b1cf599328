//! Project directory with a hash-checked artifact index.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use pis_core::trajectory::manifest::{DatasetManifest, ManifestEntry};
use pis_core::trajectory::pdb::parse_topology;
use pis_core::trajectory::pistrj::read_frames;
use pis_core::trajectory::{Topology, Trajectory};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io, Result, ServiceError};
use crate::json;

pub const INDEX_FILE: &str = "project.json";
pub const HASH_HEADER: &str = "x-pis-artifact-hash";
pub const ROOT_ENV: &str = "PIS_PROJECT_ROOT";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Relative to the project root.
    pub path: String,
    pub sha256: String,
    /// Hashes of the artifacts this one was computed from, at computation time.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectIndex {
    pub version: u32,
    pub dt_ps: f64,
    pub n_trajectories: usize,
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

#[derive(Debug, Clone)]
pub struct Artifact {
    pub bytes: Vec<u8>,
    pub hash: String,
}

pub fn traj_name(id: usize) -> String {
    format!("traj/{id}")
}

pub fn metrics_name(id: usize) -> String {
    format!("metrics/{id}")
}

pub fn states_name(id: usize) -> String {
    format!("states/{id}")
}

pub fn labels_name(id: usize) -> String {
    format!("labels/{id}")
}

#[derive(Debug)]
pub struct ProjectStore {
    root: PathBuf,
    index: RwLock<ProjectIndex>,
    recompute: Arc<AtomicBool>,
}

/// Held while derived artifacts are being replaced.
#[derive(Debug)]
pub struct RecomputeGuard(Arc<AtomicBool>);

impl Drop for RecomputeGuard {
    fn drop(&mut self) {
        self.0.store(false, Ordering::SeqCst);
    }
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let tmp = path.with_extension(format!("tmp-{}-{n}", std::process::id()));
    fs::write(&tmp, bytes).map_err(io(&tmp))?;
    fs::rename(&tmp, path).map_err(io(path))
}

impl ProjectStore {
    /// Initialises `root` with a topology and its trajectories. Fails if a
    /// project already exists there.
    pub fn create(root: &Path, topology_pdb: &str, trajectories: &[Vec<u8>]) -> Result<Self> {
        let index_path = root.join(INDEX_FILE);
        if index_path.exists() {
            return Err(ServiceError::InvalidInput(format!("project already exists at {}", root.display())));
        }
        let topology = Arc::new(parse_topology(topology_pdb)?);
        let mut dt_ps = None;
        let mut entries = Vec::with_capacity(trajectories.len());
        for (i, bytes) in trajectories.iter().enumerate() {
            let t = read_frames(bytes, topology.clone())?;
            entries.push(ManifestEntry { path: format!("traj/{i}.pistrj"), n_frames: t.n_frames() });
            match dt_ps {
                None => dt_ps = Some(t.dt_ps()),
                Some(dt) if dt != t.dt_ps() => {
                    return Err(ServiceError::InvalidInput(format!("trajectory {i} has dt {} ps, expected {dt}", t.dt_ps())))
                }
                Some(_) => {}
            }
        }
        let dt_ps = dt_ps.ok_or_else(|| ServiceError::InvalidInput("no trajectories".into()))?;
        fs::create_dir_all(root).map_err(io(root))?;
        let store = Self {
            root: root.to_path_buf(),
            index: RwLock::new(ProjectIndex { version: 1, dt_ps, n_trajectories: trajectories.len(), artifacts: BTreeMap::new() }),
            recompute: Arc::new(AtomicBool::new(false)),
        };
        store.put("topology", "topology.pdb", topology_pdb.as_bytes(), &[])?;
        for (i, bytes) in trajectories.iter().enumerate() {
            store.put(&traj_name(i), &entries[i].path, bytes, &[])?;
        }
        let manifest = DatasetManifest::from_entries(entries);
        let inputs: Vec<String> = (0..trajectories.len()).map(traj_name).collect();
        store.put("manifest", "manifest.json", manifest.to_json().as_bytes(), &inputs)?;
        Ok(store)
    }

    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(io(&path))?;
        Ok(Self {
            root: root.to_path_buf(),
            index: RwLock::new(serde_json::from_str(&text)?),
            recompute: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn index(&self) -> ProjectIndex {
        self.index.read().expect("index lock").clone()
    }

    pub fn n_trajectories(&self) -> usize {
        self.index.read().expect("index lock").n_trajectories
    }

    pub fn dt_ps(&self) -> f64 {
        self.index.read().expect("index lock").dt_ps
    }

    pub fn hash(&self, name: &str) -> Option<String> {
        self.index.read().expect("index lock").artifacts.get(name).map(|e| e.sha256.clone())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.hash(name).is_some()
    }

    pub fn path_of(&self, name: &str) -> Option<PathBuf> {
        self.index.read().expect("index lock").artifacts.get(name).map(|e| self.root.join(&e.path))
    }

    /// Writes `bytes` under `rel_path` (write-new, rename) and then records it
    /// in the index together with the current hashes of `inputs`.
    pub fn put(&self, name: &str, rel_path: &str, bytes: &[u8], inputs: &[String]) -> Result<String> {
        let mut index = self.index.write().expect("index lock");
        let mut recorded = BTreeMap::new();
        for input in inputs {
            let entry = index.artifacts.get(input).ok_or_else(|| ServiceError::NotFound(input.clone()))?;
            recorded.insert(input.clone(), entry.sha256.clone());
        }
        atomic_write(&self.root.join(rel_path), bytes)?;
        let hash = sha256_hex(bytes);
        index.artifacts.insert(name.to_string(), ArtifactEntry { path: rel_path.to_string(), sha256: hash.clone(), inputs: recorded });
        atomic_write(&self.root.join(INDEX_FILE), &json::to_vec(&*index)?)?;
        Ok(hash)
    }

    pub fn put_json<T: Serialize + ?Sized>(&self, name: &str, rel_path: &str, value: &T, inputs: &[String]) -> Result<String> {
        self.put(name, rel_path, &json::to_vec(value)?, inputs)
    }

    /// Reads an artifact, refusing it if the file no longer matches its hash or
    /// if any input has changed since it was computed.
    pub fn get(&self, name: &str) -> Result<Artifact> {
        let index = self.index.read().expect("index lock");
        let entry = index.artifacts.get(name).ok_or_else(|| ServiceError::NotFound(name.to_string()))?;
        for (input, hash) in &entry.inputs {
            match index.artifacts.get(input) {
                Some(current) if &current.sha256 == hash => {}
                _ => return Err(ServiceError::Stale(format!("{name} predates the current {input}"))),
            }
        }
        let path = self.root.join(&entry.path);
        let bytes = fs::read(&path).map_err(io(&path))?;
        let hash = sha256_hex(&bytes);
        if hash != entry.sha256 {
            return Err(ServiceError::Stale(format!("{name} does not match its recorded hash")));
        }
        Ok(Artifact { bytes, hash })
    }

    pub fn get_json<T: DeserializeOwned>(&self, name: &str) -> Result<(T, String)> {
        let a = self.get(name)?;
        Ok((serde_json::from_slice(&a.bytes)?, a.hash))
    }

    pub fn topology(&self) -> Result<Arc<Topology>> {
        let a = self.get("topology")?;
        let text = String::from_utf8(a.bytes).map_err(|e| ServiceError::InvalidInput(format!("topology: {e}")))?;
        Ok(Arc::new(parse_topology(&text)?))
    }

    pub fn trajectory(&self, id: usize) -> Result<Trajectory> {
        if id >= self.n_trajectories() {
            return Err(ServiceError::NotFound(format!("trajectory {id}")));
        }
        let top = self.topology()?;
        Ok(read_frames(&self.get(&traj_name(id))?.bytes, top)?)
    }

    pub fn trajectories(&self) -> Result<Vec<Trajectory>> {
        (0..self.n_trajectories()).map(|i| self.trajectory(i)).collect()
    }

    pub fn manifest(&self) -> Result<(DatasetManifest, String)> {
        let a = self.get("manifest")?;
        let text = String::from_utf8(a.bytes).map_err(|e| ServiceError::InvalidInput(format!("manifest: {e}")))?;
        Ok((DatasetManifest::from_json(&text)?, a.hash))
    }

    pub fn is_recomputing(&self) -> bool {
        self.recompute.load(Ordering::SeqCst)
    }

    /// Marks the start of an exclusive recompute; fails if one is running.
    pub fn begin_recompute(&self) -> Result<RecomputeGuard> {
        if self.recompute.swap(true, Ordering::SeqCst) {
            return Err(ServiceError::Busy);
        }
        Ok(RecomputeGuard(self.recompute.clone()))
    }
}

