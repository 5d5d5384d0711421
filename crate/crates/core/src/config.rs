//! Run configuration for toy training, read from JSON.
//!
//! ```json
//! {
//!   "kernel":  { "max_duration": 6, "frames": null, "noise_std": 1.0, "seed": 0 },
//!   "weights": { "lambda_length": 1.0, "lambda_duration": 1.0, "lambda_recon": 1.0,
//!                "lambda_mel": 45.0, "feature_matching_reduction": "sum" },
//!   "trainer": { "steps": 2000, "learning_rate": 0.02, "optimizer": "adam",
//!                "beta1": 0.8, "beta2": 0.99, "noise_decay_fraction": 0.8 },
//!   "task":    { "n_tokens": 6, "embed_dim": 32, "target_noise_std": 0.0, "seed": 0 }
//! }
//! ```
//!
//! Every section and field is optional and unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{FeatureReduction, LossWeights};
use crate::trainer::{make_task, Optimizer, SyntheticTask, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSection {
    pub max_duration: usize,
    /// Must equal the task's total duration when given.
    pub frames: Option<usize>,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for KernelSection {
    fn default() -> Self {
        Self {
            max_duration: 6,
            frames: None,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsSection {
    pub lambda_length: f64,
    pub lambda_duration: f64,
    pub lambda_recon: f64,
    pub lambda_mel: f64,
    pub feature_matching_reduction: FeatureReduction,
}

impl Default for WeightsSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda_length: w.lambda_length,
            lambda_duration: w.lambda_duration,
            lambda_recon: w.lambda_recon,
            lambda_mel: w.lambda_mel,
            feature_matching_reduction: FeatureReduction::default(),
        }
    }
}

impl WeightsSection {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_length: self.lambda_length,
            lambda_duration: self.lambda_duration,
            lambda_recon: self.lambda_recon,
            lambda_mel: self.lambda_mel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub noise_decay_fraction: f64,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            learning_rate: t.learning_rate,
            optimizer: t.optimizer,
            beta1: t.beta1,
            beta2: t.beta2,
            noise_decay_fraction: t.noise_decay_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub n_tokens: usize,
    pub embed_dim: usize,
    pub target_noise_std: f64,
    pub seed: u64,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            n_tokens: 6,
            embed_dim: 32,
            target_noise_std: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub kernel: KernelSection,
    pub weights: WeightsSection,
    pub trainer: TrainerSection,
    pub task: TaskSection,
}

impl ConfigFile {
    pub fn validate(&self) -> Result<()> {
        if self.kernel.max_duration == 0 {
            return Err(Error::invalid("kernel.max_duration must be at least 1"));
        }
        if self.kernel.frames == Some(0) {
            return Err(Error::invalid("kernel.frames must be at least 1"));
        }
        if self.task.n_tokens == 0 {
            return Err(Error::invalid("task.n_tokens must be at least 1"));
        }
        if self.task.embed_dim == 0 {
            return Err(Error::invalid("task.embed_dim must be at least 1"));
        }
        if !(self.task.target_noise_std >= 0.0 && self.task.target_noise_std.is_finite()) {
            return Err(Error::invalid(format!(
                "task.target_noise_std must be finite and non-negative, got {}",
                self.task.target_noise_std
            )));
        }
        self.train_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.trainer.steps,
            learning_rate: self.trainer.learning_rate,
            optimizer: self.trainer.optimizer,
            beta1: self.trainer.beta1,
            beta2: self.trainer.beta2,
            noise_std: self.kernel.noise_std,
            noise_decay_fraction: self.trainer.noise_decay_fraction,
            weights: self.weights.loss_weights(),
            seed: self.kernel.seed,
        }
    }

    /// Builds the synthetic task and checks it against `kernel.frames`.
    pub fn task(&self) -> Result<SyntheticTask> {
        self.validate()?;
        let t = make_task(
            self.task.n_tokens,
            self.kernel.max_duration,
            self.task.embed_dim,
            self.task.seed,
        )?;
        let t = if self.task.target_noise_std > 0.0 {
            t.with_target_noise(self.task.target_noise_std, self.task.seed.wrapping_add(1))?
        } else {
            t
        };
        if let Some(frames) = self.kernel.frames {
            if frames != t.frames() {
                return Err(Error::invalid(format!(
                    "kernel.frames is {frames} but the synthetic task has {} frames",
                    t.frames()
                )));
            }
        }
        Ok(t)
    }
}
