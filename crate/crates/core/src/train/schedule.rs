use serde::{Deserialize, Serialize};

use super::OptimizerState;
use crate::error::{Error, Result};

/// Optimizer and stopping settings shared by every method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub learning_rate: f64,
    /// Gradient elements are clipped into `[-clip, clip]`.
    pub clip: f64,
    pub max_halvings: u32,
    pub max_epochs: usize,
    /// Halve when `dev_k > halving_threshold · dev_{k-1}`.
    pub halving_threshold: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            clip: 5.0,
            max_halvings: 4,
            max_epochs: 30,
            halving_threshold: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &'static str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("{x} must be positive")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("clip", self.clip)?;
        positive("adam_epsilon", self.adam_epsilon)?;
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs", "must be positive"));
        }
        if !(self.halving_threshold > 0.0 && self.halving_threshold <= 1.0) {
            return Err(Error::config("halving_threshold", "must lie in (0, 1]"));
        }
        for (field, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, format!("{b} not in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Halves the learning rate when the newest dev loss is not at least
/// `1 − threshold` below the one before it. Returns whether it halved.
pub fn schedule_step<S>(dev_loss_history: &[f64], state: &mut OptimizerState<S>, schedule: &Schedule) -> bool {
    let [.., prev, cur] = dev_loss_history else {
        return false;
    };
    if *cur > schedule.halving_threshold * *prev {
        state.halve();
        true
    } else {
        false
    }
}

/// True once the halving budget is spent or the epoch cap is reached.
/// `dev_loss_history` includes the epoch-0 entry.
pub fn check_converged<S>(dev_loss_history: &[f64], state: &OptimizerState<S>, schedule: &Schedule) -> bool {
    let epochs_done = dev_loss_history.len().saturating_sub(1);
    state.halvings_done >= schedule.max_halvings || epochs_done >= schedule.max_epochs
}
