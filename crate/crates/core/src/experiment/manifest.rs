use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::hex;
use super::{ExperimentConfig, ExperimentError};

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    /// Relative to the result directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub code_version: String,
    pub parallel: bool,
    pub outputs: Vec<OutputEntry>,
    /// `(job label, seconds)`.
    pub durations: Vec<(String, f64)>,
    pub total_seconds: f64,
}

pub fn file_sha256(path: &Path) -> Result<String, ExperimentError> {
    let bytes = std::fs::read(path).map_err(|e| ExperimentError::io(path, e))?;
    Ok(hex(&Sha256::digest(bytes)))
}

impl RunManifest {
    pub fn new(command: &str, cfg: &ExperimentConfig, parallel: bool) -> Self {
        Self {
            command: command.to_string(),
            config_hash: cfg.hash(),
            seeds: cfg.seeds.clone(),
            code_version: CODE_VERSION.to_string(),
            parallel,
            outputs: Vec::new(),
            durations: Vec::new(),
            total_seconds: 0.0,
        }
    }

    /// Records every regular file under `dir` (recursively, sorted), except the manifest itself.
    pub fn record_outputs(&mut self, dir: &Path) -> Result<(), ExperimentError> {
        let mut files = Vec::new();
        collect(dir, dir, &mut files)?;
        files.sort();
        self.outputs = files
            .into_iter()
            .filter(|rel| rel != Path::new("manifest.json"))
            .map(|rel| {
                let full = dir.join(&rel);
                let bytes = std::fs::metadata(&full).map_err(|e| ExperimentError::io(&full, e))?.len();
                Ok(OutputEntry { path: rel.to_string_lossy().replace('\\', "/"), sha256: file_sha256(&full)?, bytes })
            })
            .collect::<Result<_, ExperimentError>>()?;
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, ExperimentError> {
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(self).map_err(ExperimentError::runtime)?;
        std::fs::write(&path, json).map_err(|e| ExperimentError::io(&path, e))?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self, ExperimentError> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| ExperimentError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::io(&path, e))
    }
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), ExperimentError> {
    for entry in std::fs::read_dir(dir).map_err(|e| ExperimentError::io(dir, e))? {
        let entry = entry.map_err(|e| ExperimentError::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}
