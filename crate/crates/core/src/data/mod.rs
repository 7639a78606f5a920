//! Synthetic two-domain corpora, frame stacking and length-sorted batching.

mod batch;
mod io;
mod lfr;

pub use batch::{make_batches, BatchStream};
pub use io::{read_split, write_split};
pub use lfr::stack_lfr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ctc::LabelSequence;
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Left-context frames and decimation used by the default stacking.
pub const LFR_LEFT_CONTEXT: usize = 2;
pub const LFR_DECIMATION: usize = 3;

/// Parameters of one synthetic domain.
///
/// Every symbol `k` owns a Gaussian prototype in raw feature space drawn
/// from `prototype_seed`, which both domains must share. Domain 1 moves each
/// prototype by `prototype_shift` along its own random unit direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: u8,
    /// Output classes including the blank.
    pub vocab_size: usize,
    pub raw_feature_dim: usize,
    /// Inclusive range of raw frames rendered per symbol.
    pub frames_per_symbol: [usize; 2],
    /// Inclusive range of symbols per utterance.
    pub utterance_length: [usize; 2],
    pub prototype_shift: f64,
    pub noise_sigma: f64,
    pub prototype_seed: u64,
    pub seed: u64,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
}

impl DomainSpec {
    pub fn original() -> Self {
        Self {
            domain_id: 0,
            vocab_size: 12,
            raw_feature_dim: 8,
            frames_per_symbol: [3, 5],
            utterance_length: [5, 12],
            prototype_shift: 0.0,
            noise_sigma: 0.7,
            prototype_seed: 17,
            seed: 100,
            train_size: 2000,
            dev_size: 200,
            test_size: 200,
        }
    }

    pub fn target() -> Self {
        Self {
            domain_id: 1,
            prototype_shift: 6.0,
            seed: 200,
            ..Self::original()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.domain_id > 1 {
            return Err(Error::config("domain_id", "must be 0 or 1"));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size", "needs at least one symbol plus blank"));
        }
        if self.raw_feature_dim == 0 {
            return Err(Error::config("raw_feature_dim", "must be positive"));
        }
        let [flo, fhi] = self.frames_per_symbol;
        if flo == 0 || flo > fhi {
            return Err(Error::config("frames_per_symbol", format!("bad range [{flo}, {fhi}]")));
        }
        let [llo, lhi] = self.utterance_length;
        if llo == 0 || llo > lhi {
            return Err(Error::config("utterance_length", format!("bad range [{llo}, {lhi}]")));
        }
        // A run of distinct symbols at the shortest rendering must survive decimation.
        if flo < LFR_DECIMATION {
            return Err(Error::config(
                "frames_per_symbol",
                format!("minimum {flo} is below the decimation factor {LFR_DECIMATION}; utterances would be CTC-infeasible"),
            ));
        }
        if self.domain_id == 0 && self.prototype_shift != 0.0 {
            return Err(Error::config("prototype_shift", "domain 0 is the unshifted reference"));
        }
        if !(self.prototype_shift >= 0.0 && self.prototype_shift.is_finite()) {
            return Err(Error::config("prototype_shift", "must be finite and non-negative"));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be positive"));
        }
        if self.train_size == 0 {
            return Err(Error::config("train_size", "must be positive"));
        }
        Ok(())
    }

    /// Prototype centre for every symbol (row 0, the blank, is unused).
    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.prototype_seed);
        let dim = self.raw_feature_dim;
        let base: Vec<Vec<f64>> = (0..self.vocab_size)
            .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        if self.prototype_shift == 0.0 {
            return base;
        }
        let mut shift_rng = ChaCha8Rng::seed_from_u64(self.prototype_seed ^ 0x5eed_0000_0000_0001 ^ self.domain_id as u64);
        base.into_iter()
            .map(|p| {
                let dir: Vec<f64> = (0..dim).map(|_| shift_rng.sample(StandardNormal)).collect();
                let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                p.iter()
                    .zip(&dir)
                    .map(|(x, d)| x + self.prototype_shift * d / norm)
                    .collect()
            })
            .collect()
    }
}

/// One utterance: raw frames plus its label sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence<S> {
    pub frames: Tensor<S>,
    pub labels: LabelSequence,
    pub domain_id: u8,
}

impl<S: Scalar> FeatureSequence<S> {
    pub fn raw_len(&self) -> usize {
        self.frames.rows()
    }

    /// Frames after the default stacking/decimation.
    pub fn stacked_len(&self) -> usize {
        self.raw_len().div_ceil(LFR_DECIMATION)
    }

    pub fn stacked(&self) -> Tensor<S> {
        stack_lfr(&self.frames, LFR_LEFT_CONTEXT, LFR_DECIMATION)
    }
}

/// Model-ready utterance: stacked features and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance<S> {
    pub features: Tensor<S>,
    pub labels: LabelSequence,
}

/// Stacks every utterance once so training loops do not redo it per epoch.
pub fn prepare<S: Scalar>(split: &[FeatureSequence<S>]) -> Vec<Utterance<S>> {
    split
        .iter()
        .map(|u| Utterance {
            features: u.stacked(),
            labels: u.labels.clone(),
        })
        .collect()
}

/// Prepared train/dev/test sets of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainData<S> {
    pub train: Vec<Utterance<S>>,
    pub dev: Vec<Utterance<S>>,
    pub test: Vec<Utterance<S>>,
}

impl<S: Scalar> DomainData<S> {
    pub fn from_split(split: &DatasetSplit<S>) -> Self {
        Self {
            train: prepare(&split.train),
            dev: prepare(&split.dev),
            test: prepare(&split.test),
        }
    }
}

/// FNV-1a over labels and feature bits; identifies a split across runs.
pub fn fingerprint<S: Scalar>(split: &[Utterance<S>]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |x: u64| {
        for b in x.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for u in split {
        eat(u.labels.len() as u64);
        u.labels.symbols().iter().for_each(|&k| eat(k as u64));
        eat(u.features.len() as u64);
        u.features.data().iter().for_each(|x| eat(x.as_f64().to_bits()));
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<S> {
    pub train: Vec<FeatureSequence<S>>,
    pub dev: Vec<FeatureSequence<S>>,
    pub test: Vec<FeatureSequence<S>>,
}

impl<S: Scalar> DatasetSplit<S> {
    pub fn parts(&self) -> [(&'static str, &[FeatureSequence<S>]); 3] {
        [("train", &self.train), ("dev", &self.dev), ("test", &self.test)]
    }
}

/// Renders `train + dev + test` utterances and partitions them with a
/// seeded shuffle.
pub fn gen_domain<S: Scalar>(spec: &DomainSpec) -> Result<DatasetSplit<S>> {
    spec.validate()?;
    let protos = spec.prototypes();
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::config("noise_sigma", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.train_size + spec.dev_size + spec.test_size;
    let mut all = Vec::with_capacity(total);
    while all.len() < total {
        let len = rng.random_range(spec.utterance_length[0]..=spec.utterance_length[1]);
        let symbols: Vec<usize> = (0..len).map(|_| rng.random_range(1..spec.vocab_size)).collect();
        let mut rows = Vec::new();
        for &k in &symbols {
            let n = rng.random_range(spec.frames_per_symbol[0]..=spec.frames_per_symbol[1]);
            for _ in 0..n {
                rows.push(protos[k].iter().map(|&c| S::lit(c + noise.sample(&mut rng))).collect::<Vec<S>>());
            }
        }
        let labels = LabelSequence::new(symbols)?;
        // adjacent repeats need extra frames; redraw the rare utterance that lacks them
        if !labels.is_feasible(rows.len().div_ceil(LFR_DECIMATION)) {
            continue;
        }
        all.push(FeatureSequence {
            frames: Tensor::from_rows(&rows)?,
            labels,
            domain_id: spec.domain_id,
        });
    }
    all.shuffle(&mut rng);
    let test = all.split_off(spec.train_size + spec.dev_size);
    let dev = all.split_off(spec.train_size);
    Ok(DatasetSplit { train: all, dev, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(spec: DomainSpec) -> DomainSpec {
        DomainSpec {
            train_size: 30,
            dev_size: 5,
            test_size: 5,
            ..spec
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = gen_domain::<f64>(&small(DomainSpec::original())).unwrap();
        let b = gen_domain::<f64>(&small(DomainSpec::original())).unwrap();
        assert_eq!(a, b);
        let c = gen_domain::<f64>(&small(DomainSpec { seed: 1, ..DomainSpec::original() })).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn utterances_are_feasible_finite_and_sized() {
        let spec = small(DomainSpec::target());
        let d = gen_domain::<f64>(&spec).unwrap();
        assert_eq!((d.train.len(), d.dev.len(), d.test.len()), (30, 5, 5));
        for u in d.train.iter().chain(&d.dev).chain(&d.test) {
            assert!(u.frames.all_finite());
            assert_eq!(u.domain_id, 1);
            assert!(u.labels.is_feasible(u.stacked_len()));
            assert!((5..=12).contains(&u.labels.len()));
            assert!(u.labels.symbols().iter().all(|&k| (1..12).contains(&k)));
            assert_eq!(u.frames.cols(), 8);
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let d = gen_domain::<f64>(&small(DomainSpec::original())).unwrap();
        for (i, (_, a)) in d.parts().iter().enumerate() {
            for (_, b) in d.parts().iter().skip(i + 1) {
                assert!(a.iter().all(|u| !b.contains(u)));
            }
        }
    }

    #[test]
    fn zero_shift_domains_share_prototypes() {
        let a = DomainSpec::original();
        let b = DomainSpec {
            domain_id: 1,
            prototype_shift: 0.0,
            ..DomainSpec::target()
        };
        assert_eq!(a.prototypes(), b.prototypes());
        let shifted = DomainSpec::target().prototypes();
        for (p, q) in a.prototypes().iter().zip(&shifted) {
            let d: f64 = p.iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!((d - 6.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_shift_domains_have_matching_statistics() {
        let spec = |domain_id, seed| DomainSpec {
            domain_id,
            prototype_shift: 0.0,
            seed,
            train_size: 400,
            dev_size: 1,
            test_size: 1,
            ..DomainSpec::original()
        };
        let mean = |d: &DatasetSplit<f64>| {
            let (sum, n) = d.train.iter().fold((0.0, 0usize), |(s, n), u| {
                (s + u.frames.data().iter().sum::<f64>(), n + u.frames.len())
            });
            sum / n as f64
        };
        let a = gen_domain::<f64>(&spec(0, 1)).unwrap();
        let b = gen_domain::<f64>(&spec(1, 2)).unwrap();
        assert!((mean(&a) - mean(&b)).abs() < 0.05);
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let cases = [
            (DomainSpec { frames_per_symbol: [4, 2], ..DomainSpec::original() }, "frames_per_symbol"),
            (DomainSpec { frames_per_symbol: [2, 4], ..DomainSpec::original() }, "frames_per_symbol"),
            (DomainSpec { utterance_length: [0, 3], ..DomainSpec::original() }, "utterance_length"),
            (DomainSpec { prototype_shift: 1.0, ..DomainSpec::original() }, "prototype_shift"),
            (DomainSpec { noise_sigma: 0.0, ..DomainSpec::original() }, "noise_sigma"),
        ];
        for (spec, field) in cases {
            let err = gen_domain::<f64>(&spec).unwrap_err().to_string();
            assert!(err.contains(field), "{err}");
        }
    }
}
