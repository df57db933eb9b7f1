//! Run manifests: what was read, what was written, and how long it took.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use st_align_core::data::{COORDS_FILE, EXPRESSION_FILE, FEATURES_FILE, LATENTS_FILE, PATCHES_FILE};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Effective configuration after file values and overrides.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub threads: usize,
    pub inputs: Vec<FileHash>,
    pub artifacts: Vec<FileHash>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Standard slide files present in `dir`.
pub fn slide_files(dir: &Path) -> Vec<PathBuf> {
    [COORDS_FILE, EXPRESSION_FILE, FEATURES_FILE, PATCHES_FILE, LATENTS_FILE]
        .iter()
        .map(|f| dir.join(f))
        .filter(|p| p.exists())
        .collect()
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>, threads: usize) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed,
            threads,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(FileHash {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn artifact(&mut self, path: &Path) -> Result<(), CliError> {
        self.artifacts.push(FileHash {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    /// Runs `f` and records its duration under `phase`.
    pub fn timed<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        *self.timings.entry(phase.to_string()).or_default() += start.elapsed().as_secs_f64();
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(st_align_core::Error::from)? + "\n";
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))
    }
}
