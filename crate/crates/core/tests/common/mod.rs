#![allow(dead_code)]

use mtlcf::ctc::LabelSequence;
use mtlcf::data::{gen_domain, DomainData, DomainSpec, Utterance};
use mtlcf::diff::Tensor;
use mtlcf::model::{ModelConfig, ModelParams};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn toy_config(seed: u64) -> ModelConfig {
    ModelConfig {
        input_dim: 3,
        lstm_layers: 1,
        lstm_cells: 3,
        relu_units: 4,
        vocab_size: 4,
        init_low: -0.5,
        init_high: 0.5,
        seed,
    }
}

pub fn toy_model(seed: u64) -> ModelParams<f64> {
    ModelParams::init(&toy_config(seed)).unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Random labels over `1..vocab` that fit in `frames`.
pub fn random_labels(rng: &mut ChaCha8Rng, frames: usize, vocab: usize, max_len: usize) -> LabelSequence {
    loop {
        let len = rng.random_range(1..=max_len);
        let labels = LabelSequence::new((0..len).map(|_| rng.random_range(1..vocab)).collect()).unwrap();
        if labels.is_feasible(frames) {
            return labels;
        }
    }
}

pub fn random_utterance(rng: &mut ChaCha8Rng, input_dim: usize, vocab: usize) -> Utterance<f64> {
    let frames = rng.random_range(3..=6);
    Utterance {
        features: random_tensor(rng, frames, input_dim, 1.5),
        labels: random_labels(rng, frames, vocab, 3),
    }
}

/// A small version of the default synthetic pair.
pub fn small_pair(train: usize) -> (DomainData<f64>, DomainData<f64>) {
    let shrink = |spec: DomainSpec| DomainSpec {
        train_size: train,
        dev_size: 20,
        test_size: 20,
        ..spec
    };
    let d0 = DomainData::from_split(&gen_domain(&shrink(DomainSpec::original())).unwrap());
    let d1 = DomainData::from_split(&gen_domain(&shrink(DomainSpec::target())).unwrap());
    (d0, d1)
}

pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        lstm_layers: 1,
        lstm_cells: 8,
        relu_units: 16,
        ..ModelConfig::default()
    }
}

pub mod oracles {
    use std::collections::HashMap;

    use mtlcf::ctc::ctc_loss_node;
    use mtlcf::diff::{central_differences, finite_difference_check, max_relative_error, Tensor};
    use mtlcf::losses::{distill_kl, HyperParams};
    use mtlcf::train::mtlcf_batch_gradient;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    use super::{random_labels, random_tensor, random_utterance, toy_model};

    pub const GRAD_TOL: f64 = 1e-4;
    pub const GRAD_EPS: f64 = 1e-5;

    /// Relative error of the CTC gradient through log-softmax on one random instance.
    pub fn ctc_gradient_error(rng: &mut ChaCha8Rng) -> f64 {
        let frames = rng.random_range(1..=7);
        let vocab = rng.random_range(2..=5);
        let labels = random_labels(rng, frames, vocab, 3);
        let x = random_tensor(rng, frames, vocab, 3.0);
        finite_difference_check(
            |g, v| {
                let lp = g.log_softmax(v);
                ctc_loss_node(g, lp, &labels)
            },
            &x,
            GRAD_EPS,
        )
        .unwrap()
    }

    /// Relative error of the distillation gradient in the student logits.
    pub fn kl_gradient_error(rng: &mut ChaCha8Rng) -> f64 {
        let frames = rng.random_range(1..=6);
        let vocab = rng.random_range(2..=6);
        let temperature = rng.random_range(0.5..4.0);
        let student = random_tensor(rng, frames, vocab, 4.0);
        let teacher = random_tensor(rng, frames, vocab, 4.0);
        finite_difference_check(
            |g, s| {
                let t = g.constant(teacher.clone());
                distill_kl(g, s, t, temperature)
            },
            &student,
            GRAD_EPS,
        )
        .unwrap()
    }

    /// Relative error of the full mixed objective through a toy network, on a
    /// sample of parameter coordinates from every tensor.
    pub fn composite_gradient_error(rng: &mut ChaCha8Rng, case: u64) -> f64 {
        let student = toy_model(100 + case);
        let teacher = toy_model(500 + case).frozen(true);
        let hyper = HyperParams {
            alpha: rng.random_range(0.0..1.0),
            beta: rng.random_range(0.0..1.0),
            temperature: rng.random_range(0.5..3.0),
            batch_size: 2,
            ..HyperParams::default()
        };
        let org: Vec<_> = (0..2).map(|_| random_utterance(rng, 3, 4)).collect();
        let tar: Vec<_> = (0..2).map(|_| random_utterance(rng, 3, 4)).collect();
        let targets: Vec<Tensor<f64>> = org.iter().map(|u| teacher.infer(&u.features).unwrap()).collect();
        let org_pairs: Vec<_> = org.iter().zip(&targets).collect();
        let tar_refs: Vec<_> = tar.iter().collect();

        let (_, grads) = mtlcf_batch_gradient(&student, &org_pairs, &tar_refs, &hyper).unwrap();

        let mut coords = Vec::new();
        for (i, t) in student.tensors().iter().enumerate() {
            for _ in 0..3 {
                coords.push((i, rng.random_range(0..t.len())));
            }
        }
        coords.sort_unstable();
        coords.dedup();
        let x0: Vec<f64> = coords.iter().map(|&(i, j)| student.tensors()[i].data()[j]).collect();
        let numeric = central_differences(
            |x| {
                let mut m = student.clone();
                for (&(i, j), &v) in coords.iter().zip(x) {
                    m.tensors_mut()[i].data_mut()[j] = v;
                }
                Ok(mtlcf_batch_gradient(&m, &org_pairs, &tar_refs, &hyper)?.0.total)
            },
            &x0,
            GRAD_EPS,
        )
        .unwrap();
        let analytic: Vec<f64> = coords.iter().map(|&(i, j)| grads.values[i][j]).collect();
        max_relative_error(&analytic, &numeric)
    }

    /// Memoized recursive Levenshtein distance.
    pub fn edit_distance_recursive(a: &[u8], b: &[u8]) -> usize {
        fn go(a: &[u8], b: &[u8], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
            if i == a.len() {
                return b.len() - j;
            }
            if j == b.len() {
                return a.len() - i;
            }
            if let Some(&d) = memo.get(&(i, j)) {
                return d;
            }
            let d = if a[i] == b[j] {
                go(a, b, i + 1, j + 1, memo)
            } else {
                1 + go(a, b, i + 1, j, memo)
                    .min(go(a, b, i, j + 1, memo))
                    .min(go(a, b, i + 1, j + 1, memo))
            };
            memo.insert((i, j), d);
            d
        }
        go(a, b, 0, 0, &mut HashMap::new())
    }

    /// Every sequence of length at most `max_len` over `symbols` letters.
    pub fn all_sequences(symbols: u8, max_len: usize) -> Vec<Vec<u8>> {
        let mut out = vec![Vec::new()];
        let mut layer = vec![Vec::new()];
        for _ in 0..max_len {
            layer = layer
                .iter()
                .flat_map(|s: &Vec<u8>| {
                    (0..symbols).map(move |c| {
                        let mut t = s.clone();
                        t.push(c);
                        t
                    })
                })
                .collect();
            out.extend(layer.iter().cloned());
        }
        out
    }
}
