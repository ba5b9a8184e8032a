//! Run configuration file (TOML). Every field has a default and unknown
//! keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use cmmdit_core::backbone::ModelConfig;
use cmmdit_core::flow::{SampleMode, TrainPlan};
use cmmdit_core::lora::ConditionType;
use cmmdit_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainPlan,
    pub data: DataConfig,
    pub sampling: SamplingConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `manifest.jsonl` and the images.
    pub dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { dir: "data".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub steps: usize,
    pub seed: u64,
    pub mode: SampleMode,
    pub conditions: Vec<ConditionType>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            steps: 20,
            seed: 0,
            mode: SampleMode::TrainingFree,
            conditions: vec![ConditionType::Canny, ConditionType::Depth],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: "runs".into() }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Defaults when `path` is `None`.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.sampling.steps == 0 {
            return Err(Error::Config("sampling.steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.train.steps = 17;
        cfg.sampling.mode = SampleMode::TrainingBased;
        cfg.sampling.conditions = vec![ConditionType::Subject, ConditionType::MaskFill];
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_sections_and_typos() {
        let cfg = RunConfig::parse("[train]\nsteps = 5\n\n[sampling]\nmode = \"training-based\"\n").unwrap();
        assert_eq!(cfg.train.steps, 5);
        assert_eq!(cfg.train.batch_size, TrainPlan::default().batch_size);
        assert_eq!(cfg.sampling.mode, SampleMode::TrainingBased);

        let err = RunConfig::parse("[train]\nstep = 5\n").unwrap_err();
        assert!(err.to_string().contains("step"), "{err}");
        assert!(RunConfig::parse("[trian]\n").is_err());
        assert!(RunConfig::parse("[sampling]\nsteps = 0\n").is_err());
        assert!(RunConfig::parse("[model]\nembed_dim = 65\n").is_err());
    }
}
