use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use srcorrnet::mixsim::DatasetSpec;
use srcorrnet::model::ModelConfig;
use srcorrnet::pipeline::{CssConfig, TrainConfig};

use crate::Failure;

/// Everything a run reads from its config file. Every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Generator for `synth`, and for `train` without `train_manifest`.
    pub dataset: DatasetSpec,
    /// Optimization settings, including the loss.
    pub train: TrainConfig,
    pub css: CssConfig,
    /// Fixed training corpus written by `synth`.
    pub train_manifest: Option<PathBuf>,
    /// Corpus evaluated during training for logging and early stopping.
    pub monitor_manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))
    }

    /// Applies command-line overrides; the seed drives both data and model.
    pub fn apply(&mut self, seed: Option<u64>, out: Option<PathBuf>) {
        if let Some(s) = seed {
            self.seed = Some(s);
        }
        if let Some(s) = self.seed {
            self.dataset.seed = s;
            self.train.seed = s;
        }
        if out.is_some() {
            self.out = out;
        }
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let usage = |e: srcorrnet::Error| Failure::Usage(e.to_string());
        self.model.validate().map_err(usage)?;
        self.dataset.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.css.validate().map_err(usage)
    }

    pub fn out_dir(&self) -> Result<&Path, Failure> {
        self.out
            .as_deref()
            .ok_or_else(|| Failure::Usage("an output directory is required (--out or `out` in the config)".into()))
    }
}
