use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;

fn d_batch() -> usize {
    100
}
fn d_lr() -> f64 {
    0.01
}
fn d_lambda() -> f64 {
    1.0
}
fn d_steps() -> u64 {
    250_000
}
fn d_eval_every() -> u64 {
    1000
}
fn d_eval_examples() -> usize {
    2000
}
fn d_skip_rate() -> f64 {
    0.001
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(default = "d_batch")]
    pub minibatch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    /// Precision of the Gaussian prior on every weight; `1.0` is `N(0, 1)`,
    /// `0.0` disables decay. Each minibatch carries `batch/train_size` of it.
    #[serde(default = "d_lambda")]
    pub weight_decay_lambda: f64,
    #[serde(default = "d_steps")]
    pub max_steps: u64,
    #[serde(default)]
    pub seed: u64,
    /// Test-set evaluation cadence in steps.
    #[serde(default = "d_eval_every")]
    pub eval_every: u64,
    #[serde(default = "d_eval_examples")]
    pub eval_examples: usize,
    /// Periodic checkpoint cadence in steps; `0` writes only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Fraction of examples that may be dropped for singular transforms.
    #[serde(default = "d_skip_rate")]
    pub max_skip_rate: f64,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            minibatch_size: d_batch(),
            learning_rate: d_lr(),
            weight_decay_lambda: d_lambda(),
            max_steps: d_steps(),
            seed: 0,
            eval_every: d_eval_every(),
            eval_examples: d_eval_examples(),
            checkpoint_every: 0,
            max_skip_rate: d_skip_rate(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        if self.minibatch_size == 0 {
            return Err("minibatch_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if !(self.weight_decay_lambda >= 0.0 && self.weight_decay_lambda.is_finite()) {
            return Err(format!("weight_decay_lambda must be non-negative, got {}", self.weight_decay_lambda));
        }
        if self.eval_every == 0 || self.eval_examples == 0 {
            return Err("eval_every and eval_examples must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.max_skip_rate) {
            return Err(format!("max_skip_rate must lie in [0, 1], got {}", self.max_skip_rate));
        }
        Ok(())
    }
}
