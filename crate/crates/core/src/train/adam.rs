use serde::{Deserialize, Serialize};

use super::Schedule;
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::model::Gradients;
use crate::scalar::Scalar;

/// Adam moments, clip bounds and learning-rate state for one student.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<S> {
    pub initial_learning_rate: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_low: f64,
    pub clip_high: f64,
    pub first_moment: Vec<Vec<S>>,
    pub second_moment: Vec<Vec<S>>,
    pub step: u64,
    pub halvings_done: u32,
}

/// Gradient magnitudes seen by one update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClipStats {
    pub max_abs_raw: f64,
    pub max_abs_clipped: f64,
    pub min_clipped: f64,
    pub max_clipped: f64,
    pub clipped_elements: usize,
}

impl<S: Scalar> OptimizerState<S> {
    /// Zero moments shaped like `params`.
    pub fn new(params: &[Tensor<S>], schedule: &Schedule) -> Self {
        let zeros: Vec<Vec<S>> = params.iter().map(|t| vec![S::zero(); t.len()]).collect();
        Self {
            initial_learning_rate: schedule.learning_rate,
            learning_rate: schedule.learning_rate,
            beta1: schedule.adam_beta1,
            beta2: schedule.adam_beta2,
            epsilon: schedule.adam_epsilon,
            clip_low: -schedule.clip,
            clip_high: schedule.clip,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            halvings_done: 0,
        }
    }
}

impl<S> OptimizerState<S> {
    pub fn halve(&mut self) {
        self.halvings_done += 1;
        self.learning_rate = self.initial_learning_rate * 0.5f64.powi(self.halvings_done as i32);
    }
}

/// One bias-corrected Adam update. Every gradient element is clipped into
/// `[clip_low, clip_high]` before it reaches the moments.
pub fn adam_step<S: Scalar>(
    params: &mut [Tensor<S>],
    grads: &Gradients<S>,
    state: &mut OptimizerState<S>,
) -> Result<ClipStats> {
    if params.len() != grads.values.len() || params.len() != state.first_moment.len() {
        return Err(Error::InvalidArgument(format!(
            "adam_step: {} params, {} gradients, {} moments",
            params.len(),
            grads.values.len(),
            state.first_moment.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(&grads.values).enumerate() {
        if p.len() != g.len() || p.len() != state.first_moment[i].len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: vec![p.len()],
                right: vec![g.len()],
            });
        }
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::lit(state.beta1), S::lit(state.beta2));
    let (one_b1, one_b2) = (S::one() - b1, S::one() - b2);
    let bc1 = S::lit(1.0 - state.beta1.powi(t));
    let bc2 = S::lit(1.0 - state.beta2.powi(t));
    let lr = S::lit(state.learning_rate);
    let eps = S::lit(state.epsilon);
    let (lo, hi) = (S::lit(state.clip_low), S::lit(state.clip_high));

    let mut stats = ClipStats {
        min_clipped: f64::INFINITY,
        max_clipped: f64::NEG_INFINITY,
        ..ClipStats::default()
    };
    for (i, p) in params.iter_mut().enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (j, (w, &raw)) in p.data_mut().iter_mut().zip(&grads.values[i]).enumerate() {
            let g = raw.max(lo).min(hi);
            if g != raw {
                stats.clipped_elements += 1;
            }
            let gf = g.as_f64();
            stats.max_abs_raw = stats.max_abs_raw.max(raw.abs().as_f64());
            stats.max_abs_clipped = stats.max_abs_clipped.max(gf.abs());
            stats.min_clipped = stats.min_clipped.min(gf);
            stats.max_clipped = stats.max_clipped.max(gf);
            m[j] = b1 * m[j] + one_b1 * g;
            v[j] = b2 * v[j] + one_b2 * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(stats)
}
