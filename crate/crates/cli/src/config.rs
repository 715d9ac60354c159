//! Run configuration: a versioned JSON document. Every field except
//! `version` is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use acv_core::evalio::DataSpec;
use acv_core::{PipelineConfig, TrainPlan};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Registered model name.
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default)]
    pub seed: u64,
    /// Arithmetic of training, evaluation and inference.
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub train: TrainPlan,
    /// Training data for `train`, test data for `eval` and `baseline`.
    #[serde(default)]
    pub data: DataSpec,
    /// Checkpoint read by `eval` and `infer`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

fn default_model() -> String {
    "acvnet".into()
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            model: default_model(),
            seed: 0,
            precision: Precision::default(),
            pipeline: PipelineConfig::default(),
            train: TrainPlan::default(),
            data: DataSpec::default(),
            checkpoint: None,
            out_dir: default_out(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::Usage(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.pipeline.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_takes_defaults() {
        let cfg = RunConfig::from_json(r#"{"version": 1}"#).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.pipeline.loss_weights.outputs, [0.5, 0.7, 1.0]);
    }

    #[test]
    fn partial_sections_fill_in_defaults() {
        let cfg = RunConfig::from_json(
            r#"{"version": 1, "pipeline": {"hourglasses": 0},
                "train": {"stages": [{"scope": "all", "loss": "full", "steps": 20, "lr": 0.01}]}}"#,
        )
        .unwrap();
        assert_eq!(cfg.pipeline, PipelineConfig { hourglasses: 0, ..PipelineConfig::desk() });
        assert_eq!(cfg.train, TrainPlan::single(20, 0.01));
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig { seed: 9, model: "acvnet-fast".into(), ..Default::default() };
        assert_eq!(RunConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_keys_missing_or_wrong_version() {
        assert!(RunConfig::from_json(r#"{"version": 1, "epochs": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"version": 1, "pipeline": {"max_disparity": 8}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"seed": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"version": 2}"#).is_err());
    }

    #[test]
    fn rejects_invalid_values() {
        assert!(RunConfig::from_json(r#"{"version": 1, "pipeline": {"max_disp": 30}}"#).is_err());
    }
}
