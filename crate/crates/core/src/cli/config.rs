//! Run configuration: one TOML document with `prior`, `model`, `train`, `data`,
//! `preprocess` and `synth` sections. Missing keys take their defaults;
//! unknown keys are rejected. Command-line flags override file values.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::preprocess::ToolConfig;
use crate::priors::AgingPriorParams;
use crate::synth::SynthConfig;
use crate::training::{Architecture, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    /// Brain-age output is `age_center + age_scale · y`.
    pub age_center: f64,
    pub age_scale: f64,
    pub fusion: bool,
    pub aging: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 8,
            age_center: 65.0,
            age_scale: 10.0,
            fusion: true,
            aging: true,
        }
    }
}

impl ModelConfig {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            fusion: self.fusion,
            aging: self.aging,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Stage to run when `train` is given no `--stage`; 0 means unset.
    pub stage: u8,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub jobs: usize,
    /// Cross-validation folds; 0 uses the whole cohort.
    pub folds: usize,
    /// Fold held out for testing when `folds > 0`.
    pub fold: usize,
    pub split_seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            stage: 0,
            epochs: t.epochs,
            batch: t.batch,
            lr: t.lr,
            weight_decay: t.weight_decay,
            seed: t.seed,
            jobs: t.jobs,
            folds: 0,
            fold: 0,
            split_seed: 0,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            weight_decay: self.weight_decay,
            seed: self.seed,
            jobs: self.jobs,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub cohort_manifest: Option<PathBuf>,
    pub atlas_path: Option<PathBuf>,
    /// Defaults to the built-in 48-region table when unset.
    pub relevance_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub prior: AgingPriorParams,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub data: DataConfig,
    pub preprocess: ToolConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Digest of the sections that determine trained parameters. Data paths
    /// are excluded so relocated inputs give identical checkpoints.
    pub fn training_hash(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            prior: &'a AgingPriorParams,
            model: &'a ModelConfig,
            train: &'a TrainSection,
        }
        let text = toml::to_string(&Key {
            prior: &self.prior,
            model: &self.model,
            train: &self.train,
        })
        .expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
