//! Experiment configuration file (TOML). Every table is optional; missing
//! keys take the built-in defaults.
//!
//! ```toml
//! seed = 7
//! precision = "f32"
//! grid = "grid10.toml"      # relative to this file; shipped grid if absent
//!
//! [env]
//! d = 6
//! [train]
//! train_batch = 10000
//! [train.ppo]
//! learning_rate = 1e-4
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::grid::{GridFile, GridParams, DEFAULT_GRID_TOML};
use crate::marl::TrainConfig;
use crate::offline::OfflineHyper;
use crate::predictor::PredictorHyper;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub episodes_per_bus: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 100, episodes_per_bus: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub precision: Precision,
    /// Grid parameter file; the shipped 10-bus grid when absent.
    pub grid: Option<PathBuf>,
    pub env: EnvConfig,
    pub predictor: PredictorHyper,
    pub offline: OfflineHyper,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path`; a relative `grid` entry is resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let (Some(g), Some(dir)) = (cfg.grid.as_mut(), path.parent()) {
            if g.is_relative() {
                *g = dir.join(&*g);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn grid_file(&self) -> Result<GridFile> {
        match &self.grid {
            Some(p) => GridFile::load(p),
            None => GridFile::from_toml_str(DEFAULT_GRID_TOML),
        }
    }

    pub fn grid_params<T: Scalar>(&self) -> Result<GridParams<T>> {
        GridParams::from_file(&self.grid_file()?)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        let grid: GridParams<f64> = self.grid_params()?;
        self.train.validate(grid.steps())?;
        if self.offline.t_a.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::Config("offline.t_a entries must lie in (0, 1]".into()));
        }
        Ok(())
    }
}
