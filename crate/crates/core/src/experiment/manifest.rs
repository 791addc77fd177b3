use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{io_err, ExperimentConfig, Result};
use crate::graph::FORMAT_VERSION;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of the config's compact JSON rendering. The output directory is
/// blanked first since it does not influence any result.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut cfg = cfg.clone();
    cfg.output_dir = PathBuf::new();
    hex(&Sha256::digest(serde_json::to_vec(&cfg).expect("config serializes")))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(std::fs::read(path).map_err(io_err(path))?)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to rerun a command and check its outputs. Holds no
/// timestamps, so reruns produce an identical manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub crate_version: String,
    pub model_format_version: u32,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub config: ExperimentConfig,
    pub outputs: Vec<OutputDigest>,
}

impl Manifest {
    /// Hashes `outputs`, storing their paths relative to `dir` when possible.
    pub fn new(command: &str, cfg: &ExperimentConfig, seeds: Vec<u64>, dir: &Path, outputs: &[PathBuf]) -> Result<Self> {
        let mut digests = Vec::with_capacity(outputs.len());
        for p in outputs {
            digests.push(OutputDigest {
                path: p.strip_prefix(dir).unwrap_or(p).to_path_buf(),
                sha256: sha256_file(p)?,
            });
        }
        Ok(Self {
            command: command.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            model_format_version: FORMAT_VERSION,
            config_sha256: config_hash(cfg),
            seeds,
            config: cfg.clone(),
            outputs: digests,
        })
    }

    /// Writes `manifest.json` into `dir` and returns its path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(io_err(&path))?;
        Ok(path)
    }
}
