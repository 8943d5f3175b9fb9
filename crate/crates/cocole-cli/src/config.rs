//! Run configuration: one JSON file covering training, dataset generation,
//! and output paths. Unknown keys are rejected everywhere.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use cocole_core::dataset::SynthParams;
use cocole_core::error::{Error, Result};
use cocole_core::trainer::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: SynthParams,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            data: SynthParams::default(),
            out_dir: PathBuf::from("cocole-out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|_| Error::MissingArtifact {
            what: format!("config file at {}", path.display()),
            hint: "create a config (see README)".into(),
        })?;
        let cfg: RunConfig = serde_json::from_str(&json)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.validate()?;
        Ok(())
    }

    // Fixed artifact names inside out_dir.
    pub fn dataset_path(&self) -> PathBuf {
        self.out_dir.join("dataset.json")
    }

    pub fn cache_path(&self) -> PathBuf {
        self.out_dir.join("cache.json")
    }

    pub fn prompts_path(&self) -> PathBuf {
        self.out_dir.join("prompts.json")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("checkpoint.json")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out_dir.join("metrics.jsonl")
    }

    pub fn eval_path(&self) -> PathBuf {
        self.out_dir.join("eval.json")
    }

    pub fn weights_path(&self) -> PathBuf {
        self.out_dir.join("encoder-weights.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_and_unknown_keys_rejected() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);

        let bad = r#"{"train": {}, "data": {}, "out_dir": "x", "mystery": 1}"#;
        assert!(serde_json::from_str::<RunConfig>(bad).is_err());
        let bad_nested = r#"{"train": {"learning_rate": 0.1}}"#;
        assert!(serde_json::from_str::<RunConfig>(bad_nested).is_err());
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"train": {"seed": 7}}"#).unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.epochs, TrainConfig::default().epochs);
        assert_eq!(cfg.data, SynthParams::default());
    }
}
