//! Run configuration: one JSON file, every field optional, overridable by flags.

use std::path::{Path, PathBuf};

use bertlite::{EncoderConfig, PretrainConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::failure::{CliResult, Failure};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub max_size: usize,
    pub min_freq: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self { max_size: 5000, min_freq: 1 }
    }
}

/// File locations. Relative paths resolve against the working directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    /// Checkpoint written by `train` and read by `evaluate` / `predict`.
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint written by `pretrain`; `train` starts from it when set.
    pub pretrained: Option<PathBuf>,
    pub curve: Option<PathBuf>,
    pub pretrain_curve: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub confusion: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub vocab: VocabConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.encoder.validate().map_err(|e| Failure::usage(e.to_string()))?;
        self.train.validate().map_err(|e| Failure::usage(e.to_string()))?;
        Ok(())
    }
}

/// The flag value if given, else the config value; missing both is a usage error.
pub fn pick(flag: &Option<PathBuf>, config: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    flag.clone()
        .or_else(|| config.clone())
        .ok_or_else(|| Failure::usage(format!("no {what} path given (flag or config)")))
}

/// Like [`pick`] but the file must already exist.
pub fn input(flag: &Option<PathBuf>, config: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    let path = pick(flag, config, what)?;
    if path.is_file() {
        Ok(path)
    } else {
        Err(Failure::data("missing_input", format!("{what} file {} does not exist", path.display())))
    }
}
