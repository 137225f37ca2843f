//! Single-file run configuration with full defaulting.

use serde::{Deserialize, Serialize};

use crate::corpus::WorldConfig;
use crate::eval::DEFAULT_K_LIST;
use crate::objective::LambdaSchedule;
use crate::retriever::BeamConfig;
use crate::trainer::{Mode, ObjectiveConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub out_dim: usize,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            out_dim: 64,
            seed: 0,
        }
    }
}

/// Trainer section as written by users; `lambda` falls back to the mode's
/// default schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub mode: Mode,
    pub momentum: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<LambdaSchedule>,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup_frac: f64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            mode: t.mode,
            momentum: t.momentum,
            lambda: None,
            lr: t.lr,
            batch_size: t.batch_size,
            steps: t.steps,
            warmup_frac: t.warmup_frac,
            grad_clip: t.grad_clip,
            weight_decay: t.weight_decay,
            seed: t.seed,
        }
    }
}

impl TrainerSection {
    pub fn resolve(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            momentum: self.momentum,
            lambda: self.lambda.unwrap_or_else(|| self.mode.default_lambda()),
            lr: self.lr,
            batch_size: self.batch_size,
            steps: self.steps,
            warmup_frac: self.warmup_frac,
            grad_clip: self.grad_clip,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k_list: Vec<usize>,
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_list: DEFAULT_K_LIST.to_vec(),
            split: Split::Dev,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub encoder: EncoderConfig,
    pub objective: ObjectiveConfig,
    pub trainer: TrainerSection,
    pub beam: BeamConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config error: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Fill every optional field so the echo is self-describing.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        out.trainer.lambda = Some(self.trainer.resolve().lambda);
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.trainer.resolve().validate().map_err(|e| invalid(&e))?;
        self.beam.validate().map_err(|e| invalid(&e))?;
        if self.encoder.hidden == 0 || self.encoder.out_dim == 0 {
            return Err(ConfigError::Invalid("encoder dimensions must be positive".into()));
        }
        if !(self.objective.temperature > 0.0) {
            return Err(ConfigError::Invalid("temperature must be positive".into()));
        }
        if self.eval.k_list.iter().any(|&k| k < crate::corpus::HOPS) {
            return Err(ConfigError::Invalid(format!(
                "every K must be >= {} so that K/L >= 1",
                crate::corpus::HOPS
            )));
        }
        Ok(())
    }
}
