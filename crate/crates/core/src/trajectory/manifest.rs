use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub n_frames: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestTotals {
    pub n_trajectories: usize,
    pub n_frames_total: usize,
}

/// Index of the trajectory files making up a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub totals: ManifestTotals,
}

impl DatasetManifest {
    pub fn from_entries(entries: Vec<ManifestEntry>) -> Self {
        let totals = ManifestTotals {
            n_trajectories: entries.len(),
            n_frames_total: entries.iter().map(|e| e.n_frames).sum(),
        };
        Self { entries, totals }
    }

    pub fn check_totals(&self) -> Result<()> {
        let recomputed = Self::from_entries(self.entries.clone()).totals;
        if recomputed != self.totals {
            return Err(Error::Consistency(format!(
                "manifest totals {:?} disagree with entries {:?}",
                self.totals, recomputed
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let manifest: Self = serde_json::from_str(text)?;
        manifest.check_totals()?;
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
