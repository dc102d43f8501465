//! Experiment configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use blindguard_core::attacks::{AttackConfig, AttackKind};
use blindguard_core::model::Architecture;
use blindguard_core::preprocess::{Pipeline, Transform};
use blindguard_core::train::TrainConfig;
use blindguard_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub path: PathBuf,
    /// Use only the first `n` training examples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureKind {
    Mnist,
    CifarSmall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: ArchitectureKind,
    /// Checkpoint read by attack and eval; defaults to `<out>/model.ckpt`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Hide the pipeline behind the key.
    #[serde(default = "yes")]
    pub blind: bool,
    pub transforms: Vec<Transform>,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_attack")]
    pub attack: AttackKind,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default = "default_batch_sizes")]
    pub batch_sizes: Vec<usize>,
    /// Test images used for pixel histograms.
    #[serde(default = "default_hist")]
    pub histogram_samples: usize,
}

fn default_attack() -> AttackKind {
    AttackKind::Lspga
}
fn default_batch() -> usize {
    100
}
fn default_epsilons() -> Vec<f64> {
    vec![0.1, 0.2, 0.3, 0.4, 0.5]
}
fn default_batch_sizes() -> Vec<usize> {
    vec![1, 10, 50, 100, 500]
}
fn default_hist() -> usize {
    1000
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            attack: default_attack(),
            batch_size: default_batch(),
            epsilons: default_epsilons(),
            batch_sizes: default_batch_sizes(),
            histogram_samples: default_hist(),
        }
    }
}

/// One experiment. The key is never part of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<PipelineConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses and validates; relative dataset paths resolve against the
    /// working directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg = Self::parse(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dataset.path.exists() {
            return Err(Error::Config(format!(
                "dataset path {} does not exist",
                self.dataset.path.display()
            )));
        }
        self.pipeline()?;
        self.train.validate()?;
        self.attack.validate()?;
        if self.eval.batch_size == 0 || self.eval.batch_sizes.contains(&0) {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self
            .eval
            .epsilons
            .windows(2)
            .any(|w| w[0].is_nan() || w[1].is_nan() || w[0] > w[1])
        {
            return Err(Error::Config("eval.epsilons must be sorted ascending".into()));
        }
        Ok(())
    }

    pub fn pipeline(&self) -> Result<Option<Pipeline>> {
        self.pipeline
            .as_ref()
            .map(|p| Pipeline::new(p.transforms.clone()).map_err(|e| Error::Config(e.to_string())))
            .transpose()
    }

    pub fn blind(&self) -> bool {
        self.pipeline.as_ref().is_some_and(|p| p.blind)
    }

    /// Architecture for images with `raw_channels` channels.
    pub fn architecture(&self, raw_channels: usize) -> Result<Architecture> {
        let cin = match self.pipeline()? {
            Some(p) => p.output_channels(raw_channels),
            None => raw_channels,
        };
        Ok(match self.model.architecture {
            ArchitectureKind::Mnist => Architecture::mnist(cin),
            ArchitectureKind::CifarSmall => Architecture::cifar_small(cin),
        })
    }

    /// `--seed` replaces every seed in the file.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.attack.seed = seed;
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// The configuration as echoed into reports: everything except the
    /// output location, so reruns elsewhere compare equal.
    pub fn echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("out");
        }
        v
    }
}
