//! Run manifests: what was produced, from which configuration, and how long it took.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use velofilt_core::io::write_atomic;

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub wall_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_sha256: String,
    pub tool_version: String,
    pub seed: u64,
    pub threads: usize,
    pub artifacts: Vec<Artifact>,
    pub stages: Vec<StageTiming>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunManifest {
    /// Loads the manifest in `dir` when it belongs to the same configuration, else starts afresh.
    pub fn open(dir: &Path, config_sha256: &str, seed: u64, threads: usize) -> Self {
        let fresh = Self {
            config_sha256: config_sha256.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            threads,
            artifacts: Vec::new(),
            stages: Vec::new(),
        };
        fs::read(dir.join(MANIFEST_FILE))
            .ok()
            .and_then(|b| serde_json::from_slice::<RunManifest>(&b).ok())
            .filter(|m| m.config_sha256 == fresh.config_sha256 && m.seed == seed && m.tool_version == fresh.tool_version)
            .map(|m| Self { threads, ..m })
            .unwrap_or(fresh)
    }

    /// Records (or replaces) the checksums of `paths`.
    pub fn record(&mut self, dir: &Path, paths: &[PathBuf]) -> CliResult<()> {
        for p in paths {
            let bytes = fs::read(p).map_err(|e| CliError::data(format!("reading {}: {e}", p.display())))?;
            let rel = p.strip_prefix(dir).unwrap_or(p).to_string_lossy().replace('\\', "/");
            let a = Artifact { path: rel, sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 };
            match self.artifacts.iter_mut().find(|x| x.path == a.path) {
                Some(slot) => *slot = a,
                None => self.artifacts.push(a),
            }
        }
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(())
    }

    pub fn timing(&mut self, stage: &str, wall_s: f64) {
        self.stages.push(StageTiming { stage: stage.to_string(), wall_s });
    }

    pub fn save(&self, dir: &Path) -> CliResult<()> {
        let bytes = serde_json::to_vec_pretty(self).map_err(|e| CliError::data(e.to_string()))?;
        write_atomic(&dir.join(MANIFEST_FILE), &bytes)?;
        Ok(())
    }
}
