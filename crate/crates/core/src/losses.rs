//! The multi-task objective.
//!
//! ```text
//! sub_loss1 = T² · KL(softmax(student/T) ‖ softmax(teacher/T))   original-domain input
//! sub_loss2 = CTC(student, y₀)                                    original-domain input
//! loss1     = α · sub_loss1 + (1 − α) · sub_loss2
//! loss2     = CTC(student, y₁)                                    target-domain input
//! total     = β · loss1 + (1 − β) · loss2
//! ```
//!
//! The KL term is averaged over frames; every term is reduced over the batch
//! the same way ([`BatchReduction`]), so the mixes stay convex combinations.

use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_loss_node, LabelSequence};
use crate::diff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchReduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Weight of distillation against original-domain CTC inside task 1.
    pub alpha: f64,
    /// Weight of task 1 against target-domain CTC.
    pub beta: f64,
    pub temperature: f64,
    pub batch_size: usize,
    pub reduction: BatchReduction,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            temperature: 1.0,
            batch_size: 4,
            reduction: BatchReduction::Mean,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", format!("{} not in [0, 1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config("beta", format!("{} not in [0, 1]", self.beta)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        Ok(())
    }

    /// Per-utterance factor applied to every summed term.
    pub fn batch_weight(&self, batch_len: usize) -> f64 {
        match self.reduction {
            BatchReduction::Mean => 1.0 / batch_len as f64,
            BatchReduction::Sum => 1.0,
        }
    }
}

/// Values of every term for one step (or one evaluation pass).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sub_loss1: f64,
    pub sub_loss2: f64,
    pub loss1: f64,
    pub loss2: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Mixes already-reduced terms. Rejects non-finite inputs so a bad step
    /// never reaches the optimizer.
    pub fn compose(sub_loss1: f64, sub_loss2: f64, loss2: f64, hyper: &HyperParams) -> Result<Self> {
        let loss1 = loss_task1(sub_loss1, sub_loss2, hyper)?;
        loss_total(loss1, loss2, hyper).map(|total| Self {
            sub_loss1,
            sub_loss2,
            loss1,
            loss2,
            total,
        })
    }
}

/// `α · sub_loss1 + (1 − α) · sub_loss2`.
pub fn loss_task1(sub_loss1: f64, sub_loss2: f64, hyper: &HyperParams) -> Result<f64> {
    finite("sub_loss1", sub_loss1)?;
    finite("sub_loss2", sub_loss2)?;
    Ok(mix(hyper.alpha, sub_loss1, sub_loss2))
}

/// `β · loss1 + (1 − β) · loss2`.
pub fn loss_total(loss1: f64, loss2: f64, hyper: &HyperParams) -> Result<f64> {
    finite("loss1", loss1)?;
    finite("loss2", loss2)?;
    Ok(mix(hyper.beta, loss1, loss2))
}

/// Convex mix that returns an endpoint exactly when the weight is 0 or 1.
fn mix(w: f64, a: f64, b: f64) -> f64 {
    if w == 1.0 {
        a
    } else if w == 0.0 {
        b
    } else {
        w * a + (1.0 - w) * b
    }
}

fn finite(what: &str, x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} = {x}")))
    }
}

/// Temperature-scaled distillation term on `[T × V]` log-probability (or
/// logit) nodes: `T² · mean_frames KL(student ‖ teacher)`, new model first.
/// The teacher must not require gradients.
pub fn distill_kl<S: Scalar>(g: &mut Graph<'_, S>, student: Var, teacher: Var, temperature: S) -> Result<Var> {
    if g.shape(student) != g.shape(teacher) {
        return Err(Error::ShapeMismatch {
            op: "distill_kl",
            left: g.shape(student).to_vec(),
            right: g.shape(teacher).to_vec(),
        });
    }
    if g.requires_grad(teacher) {
        return Err(Error::InvalidArgument("distillation teacher must be frozen".into()));
    }
    let inv_t = S::one() / temperature;
    let s = g.scale(student, inv_t);
    let log_p1 = g.log_softmax(s);
    let t = g.scale(teacher, inv_t);
    let log_p0 = g.log_softmax(t);
    let p1 = g.exp(log_p1);
    let diff = g.sub(log_p1, log_p0)?;
    let terms = g.mul(p1, diff)?;
    let frames = S::from_usize(g.shape(student)[0]).expect("frame count fits scalar");
    let total = g.sum(terms);
    Ok(g.scale(total, temperature * temperature / frames))
}

/// Graph nodes for task 1 on one original-domain utterance.
#[derive(Debug, Clone, Copy)]
pub struct Task1Nodes {
    pub sub_loss1: Var,
    pub sub_loss2: Var,
    pub loss1: Var,
}

/// `α · distill_kl + (1 − α) · CTC(student, labels)` for one utterance.
pub fn task1_nodes<S: Scalar>(
    g: &mut Graph<'_, S>,
    student: Var,
    teacher: Var,
    labels: &LabelSequence,
    hyper: &HyperParams,
) -> Result<Task1Nodes> {
    let sub_loss1 = distill_kl(g, student, teacher, S::lit(hyper.temperature))?;
    let sub_loss2 = ctc_loss_node(g, student, labels)?;
    let a = g.scale(sub_loss1, S::lit(hyper.alpha));
    let b = g.scale(sub_loss2, S::lit(1.0 - hyper.alpha));
    let loss1 = g.add(a, b)?;
    Ok(Task1Nodes {
        sub_loss1,
        sub_loss2,
        loss1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{finite_difference_check, Tensor};

    fn hyper(alpha: f64, beta: f64) -> HyperParams {
        HyperParams {
            alpha,
            beta,
            ..HyperParams::default()
        }
    }

    fn kl_of(student: &[f64], teacher: &[f64], frames: usize, t: f64) -> f64 {
        let v = student.len() / frames;
        let mut g = Graph::new();
        let s = g.constant(Tensor::new(vec![frames, v], student.to_vec()).unwrap());
        let te = g.constant(Tensor::new(vec![frames, v], teacher.to_vec()).unwrap());
        let k = distill_kl(&mut g, s, te, t).unwrap();
        g.scalar(k).unwrap()
    }

    #[test]
    fn kl_of_identical_inputs_is_zero() {
        let x = [0.3, -1.0, 2.0, 0.1, 0.0, -0.4];
        assert!(kl_of(&x, &x, 2, 1.0).abs() < 1e-15);
    }

    #[test]
    fn kl_two_class_example() {
        let kl = kl_of(&[1.0, 0.0], &[0.0, 1.0], 1, 1.0);
        // p1 = (e/(1+e), 1/(1+e)), log-ratio ±1
        let p = 1f64.exp() / (1.0 + 1f64.exp());
        let expect = p * 1.0 + (1.0 - p) * -1.0;
        assert!((kl - expect).abs() < 1e-12);
        assert!((kl - 0.462_117_157_260_009_76).abs() < 1e-12);
    }

    #[test]
    fn high_temperature_flattens_distributions() {
        // the T² factor keeps the scaled term O(1); the softened
        // distributions themselves converge
        let t = 1e3;
        let kl = kl_of(&[2.0, -1.0, 0.5], &[-1.0, 3.0, 0.0], 1, t) / (t * t);
        assert!(kl < 1e-4, "{kl}");
    }

    #[test]
    fn kl_rejects_bad_inputs() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::new(vec![1, 3], vec![0.0, 1.0, 2.0]).unwrap());
        assert!(matches!(distill_kl(&mut g, a, b, 1.0), Err(Error::ShapeMismatch { .. })));
        let live = g.variable(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
        assert!(distill_kl(&mut g, a, live, 1.0).is_err());
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let x = Tensor::new(vec![3, 4], vec![0.2, -0.7, 1.1, 0.0, 1.5, 0.3, -0.2, -1.0, 0.4, 0.4, -1.8, 0.9]).unwrap();
        let teacher = Tensor::new(vec![3, 4], vec![-0.5, 0.1, 0.8, 0.3, 0.0, 1.0, -1.0, 0.5, 2.0, -0.3, 0.1, 0.0]).unwrap();
        for t in [1.0, 2.5] {
            let err = finite_difference_check(
                |g, v| {
                    let te = g.constant(teacher.clone());
                    distill_kl(g, v, te, t)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn degenerate_weights_select_terms() {
        assert_eq!(loss_task1(0.4, 0.6, &hyper(1.0, 0.5)).unwrap(), 0.4);
        assert_eq!(loss_task1(0.4, 0.6, &hyper(0.0, 0.5)).unwrap(), 0.6);
        assert!((loss_task1(0.4, 0.6, &hyper(0.5, 0.5)).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(loss_total(0.3, 0.6, &hyper(0.5, 0.0)).unwrap(), 0.6);
        let b = LossBreakdown::compose(0.2, 0.4, 0.6, &hyper(1.0, 1.0)).unwrap();
        assert_eq!(b.total, 0.2);
    }

    #[test]
    fn headline_configuration_arithmetic() {
        let b = LossBreakdown::compose(0.2, 0.4, 0.6, &hyper(0.5, 0.5)).unwrap();
        assert!((b.loss1 - 0.3).abs() < 1e-12);
        assert!((b.total - 0.45).abs() < 1e-12);
    }

    #[test]
    fn non_finite_terms_are_rejected() {
        assert!(matches!(
            LossBreakdown::compose(f64::NAN, 0.4, 0.6, &hyper(0.5, 0.5)),
            Err(Error::NonFinite(_))
        ));
        assert!(loss_total(0.1, f64::INFINITY, &hyper(0.5, 0.5)).is_err());
    }

    #[test]
    fn hyper_validation_names_fields() {
        for (h, field) in [
            (hyper(1.5, 0.5), "alpha"),
            (hyper(0.5, -0.1), "beta"),
            (HyperParams { temperature: 0.0, ..HyperParams::default() }, "temperature"),
            (HyperParams { batch_size: 0, ..HyperParams::default() }, "batch_size"),
        ] {
            assert!(h.validate().unwrap_err().to_string().contains(field));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn breakdown_identities_and_convexity(
                s1 in 0.0f64..10.0, s2 in 0.0f64..10.0, l2 in 0.0f64..10.0,
                alpha in 0.0f64..=1.0, beta in 0.0f64..=1.0,
            ) {
                let h = hyper(alpha, beta);
                let b = LossBreakdown::compose(s1, s2, l2, &h).unwrap();
                prop_assert!((b.loss1 - (alpha * s1 + (1.0 - alpha) * s2)).abs() <= 1e-12);
                prop_assert!((b.total - (beta * b.loss1 + (1.0 - beta) * b.loss2)).abs() <= 1e-12);
                let lo = b.loss1.min(b.loss2) - 1e-12;
                let hi = b.loss1.max(b.loss2) + 1e-12;
                prop_assert!(lo <= b.total && b.total <= hi);
            }

            #[test]
            fn kl_is_nonnegative(
                s in proptest::collection::vec(-3.0f64..3.0, 6),
                t in proptest::collection::vec(-3.0f64..3.0, 6),
                temp in 0.5f64..4.0,
            ) {
                prop_assert!(kl_of(&s, &t, 2, temp) >= -1e-12);
            }
        }
    }
}
