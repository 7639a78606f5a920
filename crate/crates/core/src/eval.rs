//! Character error rate, model evaluation and run comparison tables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ctc::{greedy_decode, LabelSequence};
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::scalar::Scalar;
use crate::train::{Method, RunSummary};

/// Unit-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance over the reference length. An empty reference scores 0
/// against an empty hypothesis and the hypothesis length otherwise.
pub fn cer(hyp: &LabelSequence, reference: &LabelSequence) -> f64 {
    if reference.is_empty() {
        return hyp.len() as f64;
    }
    edit_distance(hyp.symbols(), reference.symbols()) as f64 / reference.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub utterance_count: usize,
    pub mean_cer: f64,
    pub per_utterance: Vec<f64>,
}

impl EvalReport {
    /// Writes `index,cer` rows followed by nothing else; the mean is the
    /// column average.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["dataset_id", "utterance", "cer"]).map_err(csv_err)?;
        for (i, c) in self.per_utterance.iter().enumerate() {
            w.write_record([self.dataset_id.as_str(), &i.to_string(), &c.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Greedy-decodes every utterance and averages the per-utterance CER.
pub fn evaluate<S: Scalar>(model: &ModelParams<S>, split: &[Utterance<S>], dataset_id: &str) -> Result<EvalReport> {
    let per_utterance = split
        .iter()
        .map(|u| Ok(cer(&greedy_decode(&model.infer(&u.features)?), &u.labels)))
        .collect::<Result<Vec<f64>>>()?;
    let mean_cer = if per_utterance.is_empty() {
        0.0
    } else {
        per_utterance.iter().sum::<f64>() / per_utterance.len() as f64
    };
    Ok(EvalReport {
        dataset_id: dataset_id.to_string(),
        utterance_count: per_utterance.len(),
        mean_cer,
        per_utterance,
    })
}

/// One line of the method comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    /// Target-domain training utterances seen by the run (0 for the reference).
    pub scale_tar: usize,
    pub cer_org: Option<f64>,
    pub cer_tar: Option<f64>,
}

/// A reference row for the original model (the epoch-0 entry of the first
/// run that starts from it) followed by one row per run with its final CERs.
pub fn build_comparison(runs: &[RunSummary]) -> Result<Vec<ComparisonRow>> {
    let first = runs
        .first()
        .ok_or_else(|| Error::InvalidArgument("no runs to compare".into()))?;
    if let Some(bad) = runs.iter().find(|r| r.test_fingerprint != first.test_fingerprint) {
        return Err(Error::InvalidArgument(format!(
            "run {} (seed {}) was evaluated on different test sets than {} (seed {})",
            bad.label, bad.seed, first.label, first.seed
        )));
    }
    let mut rows = Vec::with_capacity(runs.len() + 1);
    if let Some(base) = runs.iter().find(|r| matches!(r.method, Method::Ft | Method::Mtlcf)) {
        let e0 = &base.history[0];
        rows.push(ComparisonRow {
            method: "original".into(),
            scale_tar: 0,
            cer_org: e0.cer_org,
            cer_tar: e0.cer_tar,
        });
    }
    for r in runs {
        let last = r.history.last().ok_or_else(|| Error::InvalidArgument(format!("run {} has no history", r.label)))?;
        rows.push(ComparisonRow {
            method: r.label.clone(),
            scale_tar: r.scale_tar,
            cer_org: last.cer_org,
            cer_tar: last.cer_tar,
        });
    }
    Ok(rows)
}

pub fn write_comparison(path: impl AsRef<Path>, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_comparison(path: impl AsRef<Path>) -> Result<Vec<ComparisonRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::format("csv", e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn seq(v: &[usize]) -> LabelSequence {
        LabelSequence::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cer_examples() {
        assert_eq!(cer(&seq(&[1, 2, 3]), &seq(&[1, 2, 3])), 0.0);
        assert!((cer(&seq(&[1, 4, 3]), &seq(&[1, 2, 3])) - 1.0 / 3.0).abs() < 1e-15);
        // one substitution plus two insertions
        assert_eq!(cer(&seq(&[4, 5, 6]), &seq(&[1])), 3.0);
    }

    #[test]
    fn empty_reference_convention() {
        assert_eq!(cer(&LabelSequence::empty(), &LabelSequence::empty()), 0.0);
        assert_eq!(cer(&seq(&[1, 2]), &LabelSequence::empty()), 2.0);
    }

    fn memo(a: &[u8], b: &[u8], cache: &mut HashMap<(usize, usize), usize>) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        if let Some(&d) = cache.get(&(a.len(), b.len())) {
            return d;
        }
        let d = if a[0] == b[0] {
            memo(&a[1..], &b[1..], cache)
        } else {
            1 + memo(&a[1..], b, cache)
                .min(memo(a, &b[1..], cache))
                .min(memo(&a[1..], &b[1..], cache))
        };
        cache.insert((a.len(), b.len()), d);
        d
    }

    #[test]
    fn metric_properties_on_random_triples() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let word = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<u8> {
            let n = rng.random_range(0..8);
            (0..n).map(|_| rng.random_range(0..4)).collect()
        };
        for _ in 0..300 {
            let (a, b, c) = (word(&mut rng), word(&mut rng), word(&mut rng));
            assert_eq!(edit_distance(&a, &a), 0);
            assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
            assert_eq!(edit_distance(&a, &b), memo(&a, &b, &mut HashMap::new()));
        }
    }

    #[test]
    fn comparison_csv_round_trip() {
        let rows = vec![
            ComparisonRow { method: "original".into(), scale_tar: 0, cer_org: Some(0.1), cer_tar: Some(1.05) },
            ComparisonRow { method: "ft".into(), scale_tar: 600, cer_org: Some(0.9004), cer_tar: None },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cmp.csv");
        write_comparison(&p, &rows).unwrap();
        assert_eq!(read_comparison(&p).unwrap(), rows);
    }
}
