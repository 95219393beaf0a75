//! Run configuration files.
//!
//! A config is a TOML document with three optional tables that map field
//! for field onto the library types:
//!
//! ```toml
//! [corpus]            # CorpusSpec
//! size = 5000
//! vocab_size = 50
//! prompt_len = [2, 4]
//! response_len = [4, 12]
//! length_bias = "LONG"         # LONG | SHORT | NEUTRAL | MIXED
//! quality_gap = 0.0
//! seed = 42
//!
//! [loss]              # LossConfig
//! variant = "SAMPO"            # DPO | SAMPO | SANORM | TOPK
//! beta = 0.1
//! sft_weight = 0.0
//! iterative_refresh_every = 0  # 0 = frozen, k = every k steps, "epoch"
//! seed = 42
//!
//! [train]             # TrainConfig
//! epochs = 1
//! learning_rate = 0.001
//! optimizer = "ADAMW"          # ADAMW | SGD
//! ```
//!
//! Missing keys take their defaults; unknown keys are errors.

use anyhow::{Context, Result};
use sampo_core::{CorpusSpec, LossConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub corpus: CorpusSpec,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// The training config with its loss section attached.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            loss: self.loss.clone(),
            ..self.train.clone()
        }
    }
}
