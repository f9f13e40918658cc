//! Experiment files: one TOML document with `[model]`, `[task]` and
//! `[train]` tables.
//!
//! ```toml
//! [model]
//! vocab = 64
//! d_model = 64
//! n_heads = 4
//! n_layers = 1
//! d_ff = 256
//! max_seq = 32
//! momentum = { gamma = 3.0, beta = 0.0 }
//! encoding = { kind = "multi_frequency", base = 10000.0 }
//!
//! [task]
//! kind = "assoc_recall"
//! n_pairs = 14
//! key_lo = 0
//! key_hi = 64
//! val_lo = 0
//! val_hi = 64
//!
//! [train]
//! duration = { mode = "steps", steps = 2000 }
//! batch_size = 64
//! lr = 3e-4
//! ```
//!
//! Unknown keys are rejected by name.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::ModelConfig;
use crate::tasks::TaskSpec;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            LabError::Config(m) => LabError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.train.validate()?;
        if self.model.vocab < self.task.vocab_size() {
            return Err(LabError::Config(format!(
                "model.vocab {} is smaller than the task vocabulary {}",
                self.model.vocab,
                self.task.vocab_size()
            )));
        }
        if self.model.max_seq < self.task.seq_len() {
            return Err(LabError::Config(format!(
                "model.max_seq {} is shorter than task sequences {}",
                self.model.max_seq,
                self.task.seq_len()
            )));
        }
        Ok(())
    }

    /// Uses `seed` for both initialization and data.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }
}
