//! Run configuration: one JSON document drives training, evaluation,
//! inference, and visualization. Missing fields take defaults, so partial
//! configs stay valid; the fully merged config is persisted next to every
//! run's outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::BackboneConfig;
use crate::data::synth::SyntheticSpec;
use crate::heads::HeadConfig;
use crate::params::fnv1a;
use crate::train::adamw::AdamWConfig;
use crate::train::losses::LossWeights;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    #[serde(flatten)]
    pub adamw: AdamWConfig,
    pub max_steps: usize,
    pub batch_size: usize,
    /// Batch gradients are rescaled to this global l2 norm when they exceed
    /// it; 0 disables clipping.
    pub max_grad_norm: f64,
    /// Fraction of max_steps after which the learning rate is multiplied
    /// once by `lr_decay_factor`.
    pub lr_decay_fraction: f64,
    pub lr_decay_factor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            adamw: AdamWConfig::default(),
            max_steps: 1500,
            batch_size: 8,
            max_grad_norm: 1.0,
            lr_decay_fraction: 0.9,
            lr_decay_factor: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Directory holding (or receiving) the dataset files and manifest.
    /// Defaults to `<out_dir>/dataset` when empty.
    pub dir: Option<PathBuf>,
    #[serde(flatten)]
    pub synthetic: SyntheticSpec,
    pub val_count: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            dir: None,
            synthetic: SyntheticSpec { count: 600, ..Default::default() },
            val_count: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub dataset: DatasetConfig,
    pub eval_interval: usize,
    pub log_interval: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: 1,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            backbone: BackboneConfig::default(),
            head: HeadConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            dataset: DatasetConfig::default(),
            eval_interval: 500,
            log_interval: 25,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let bytes = std::fs::read(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let cfg: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| ConfigError::Parse { path: path.display().to_string(), detail: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != 1 {
            return Err(ConfigError::Invalid(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        self.backbone.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.loss.validate().map_err(ConfigError::Invalid)?;
        if self.optim.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be positive".into()));
        }
        if self.dataset.val_count > self.dataset.synthetic.count {
            return Err(ConfigError::Invalid("val_count exceeds dataset count".into()));
        }
        if !(0.0..=1.0).contains(&self.optim.lr_decay_fraction) {
            return Err(ConfigError::Invalid("lr_decay_fraction must lie in [0,1]".into()));
        }
        if self.head.num_classes != crate::data::synth::NUM_CLASSES {
            return Err(ConfigError::Invalid(format!(
                "num_classes must be {} for the synthetic class table",
                crate::data::synth::NUM_CLASSES
            )));
        }
        Ok(())
    }

    /// Where dataset files live for this run.
    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset.dir.clone().unwrap_or_else(|| self.out_dir.join("dataset"))
    }

    /// Canonical JSON of the merged config.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Stable hash over the canonical JSON, stored in checkpoints.
    pub fn hash(&self) -> String {
        format!("{:016x}", fnv1a(&self.to_json()))
    }

    /// Hash of the architecture-defining sections only (backbone + head):
    /// a checkpoint loads wherever these match, regardless of paths, seeds,
    /// or training hyperparameters.
    pub fn model_hash(&self) -> String {
        let doc = serde_json::json!({
            "backbone": &self.backbone,
            "head": &self.head,
        });
        format!("{:016x}", fnv1a(&doc.to_string()))
    }

    /// Persist the merged config into the output directory.
    pub fn persist(&self, dir: &Path) -> Result<PathBuf, ConfigError> {
        std::fs::create_dir_all(dir)
            .map_err(|source| ConfigError::Io { path: dir.display().to_string(), source })?;
        let path = dir.join("effective_config.json");
        std::fs::write(&path, self.to_json())
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Ok(path)
    }
}
