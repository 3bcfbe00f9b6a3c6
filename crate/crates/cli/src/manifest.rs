//! Run manifest written next to every command's artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fdia::config::ExperimentConfig;
use fdia::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

impl FileHash {
    pub fn of(path: &Path) -> Result<Self> {
        let data = fs::read(path)?;
        Ok(Self { path: path.to_path_buf(), sha256: hex::encode(Sha256::digest(&data)), bytes: data.len() as u64 })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub threads: usize,
    /// Effective configuration after flags, file, and defaults are merged.
    pub config: ExperimentConfig,
    pub inputs: Vec<FileHash>,
    /// SHA-256 over the effective configuration and the input hashes.
    pub input_hash: String,
    pub artifacts: Vec<FileHash>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
    pub summary: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig, threads: usize) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            argv: std::env::args().collect(),
            seed: config.seed,
            threads,
            config: config.clone(),
            inputs: Vec::new(),
            input_hash: String::new(),
            artifacts: Vec::new(),
            timings: BTreeMap::new(),
            summary: serde_json::Value::Null,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileHash::of(path)?);
        Ok(())
    }

    pub fn artifact(&mut self, path: &Path) -> Result<()> {
        self.artifacts.push(FileHash::of(path)?);
        Ok(())
    }

    pub fn write(mut self, path: &Path) -> Result<()> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config)?);
        for i in &self.inputs {
            h.update(i.sha256.as_bytes());
        }
        self.input_hash = hex::encode(h.finalize());
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(&self)?)?;
        Ok(())
    }
}

/// `<file>.manifest.json` beside a single-file artifact.
pub fn beside(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}
