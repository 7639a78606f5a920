//! Reverse-mode gradients against central finite differences.

mod common;

use common::oracles::{composite_gradient_error, ctc_gradient_error, kl_gradient_error, GRAD_TOL};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 25;

#[test]
fn ctc_through_log_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..INSTANCES {
        let err = ctc_gradient_error(&mut rng);
        assert!(err < GRAD_TOL, "case {case}: relative error {err:e}");
    }
}

#[test]
fn distillation_kl_in_student_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..INSTANCES {
        let err = kl_gradient_error(&mut rng);
        assert!(err < GRAD_TOL, "case {case}: relative error {err:e}");
    }
}

#[test]
fn composite_objective_through_toy_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for case in 0..INSTANCES {
        let err = composite_gradient_error(&mut rng, case);
        assert!(err < GRAD_TOL, "case {case}: relative error {err:e}");
    }
}
