//! Connectionist Temporal Classification.
//!
//! The loss runs the forward–backward recursions over the blank-augmented
//! label lattice entirely in log space. Symbol `0` is the blank; real labels
//! are `1..V`.

use crate::diff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::{log_add, log_sum_exp, Scalar};

pub const BLANK: usize = 0;

/// Target symbols for one utterance. Never contains the blank.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct LabelSequence(Vec<usize>);

impl LabelSequence {
    pub fn new(symbols: Vec<usize>) -> Result<Self> {
        if symbols.contains(&BLANK) {
            return Err(Error::InvalidLabel {
                symbol: BLANK,
                max: usize::MAX,
            });
        }
        Ok(Self(symbols))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn symbols(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of adjacent equal pairs; each needs a separating blank frame.
    pub fn repeats(&self) -> usize {
        self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// Fewest frames that can emit this sequence.
    pub fn min_frames(&self) -> usize {
        self.len() + self.repeats()
    }

    pub fn is_feasible(&self, frames: usize) -> bool {
        frames >= self.min_frames()
    }

    fn check(&self, frames: usize, vocab: usize) -> Result<()> {
        if let Some(&bad) = self.0.iter().find(|&&s| s >= vocab) {
            return Err(Error::InvalidLabel {
                symbol: bad,
                max: vocab - 1,
            });
        }
        if !self.is_feasible(frames) {
            return Err(Error::Infeasible {
                frames,
                labels: self.len(),
                repeats: self.repeats(),
            });
        }
        Ok(())
    }
}

impl TryFrom<Vec<usize>> for LabelSequence {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LabelSequence> for Vec<usize> {
    fn from(l: LabelSequence) -> Self {
        l.0
    }
}

/// Negative log-likelihood and its gradient with respect to the per-frame
/// log-probabilities (treated as free inputs).
#[derive(Debug, Clone)]
pub struct CtcResult<S> {
    pub loss: S,
    pub grad_logprobs: Tensor<S>,
}

/// CTC loss of `labels` under a `[T×V]` matrix of per-frame log-probabilities.
pub fn ctc_loss<S: Scalar>(logprobs: &Tensor<S>, labels: &LabelSequence) -> Result<CtcResult<S>> {
    let (frames, vocab) = dims(logprobs)?;
    labels.check(frames, vocab)?;
    let lp = logprobs.data();
    let ext = extend(labels);
    let states = ext.len();
    let ninf = S::neg_infinity();
    let at = |t: usize, k: usize| lp[t * vocab + k];

    let mut alpha = vec![ninf; frames * states];
    alpha[0] = at(0, ext[0]);
    if states > 1 {
        alpha[1] = at(0, ext[1]);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * states);
        let prev = &prev[(t - 1) * states..];
        for s in 0..states {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip_allowed(&ext, s) {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = acc + at(t, ext[s]);
        }
    }

    // beta excludes the emission at its own frame, so alpha·beta is the mass
    // of all paths through (t, s).
    let mut beta = vec![ninf; frames * states];
    let last = (frames - 1) * states;
    beta[last + states - 1] = S::zero();
    if states > 1 {
        beta[last + states - 2] = S::zero();
    }
    for t in (0..frames - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * states);
        let cur = &mut cur[t * states..];
        for s in 0..states {
            let mut acc = next[s] + at(t + 1, ext[s]);
            if s + 1 < states {
                acc = log_add(acc, next[s + 1] + at(t + 1, ext[s + 1]));
            }
            if s + 2 < states && skip_allowed(&ext, s + 2) {
                acc = log_add(acc, next[s + 2] + at(t + 1, ext[s + 2]));
            }
            cur[s] = acc;
        }
    }

    let log_p = if states > 1 {
        log_add(alpha[last + states - 1], alpha[last + states - 2])
    } else {
        alpha[last]
    };
    if !log_p.is_finite() {
        return Err(Error::NonFinite(format!(
            "CTC likelihood (log p = {log_p})"
        )));
    }

    let mut grad = vec![S::zero(); frames * vocab];
    let mut per_symbol = vec![ninf; vocab];
    for t in 0..frames {
        per_symbol.iter_mut().for_each(|x| *x = ninf);
        for s in 0..states {
            let k = ext[s];
            per_symbol[k] = log_add(per_symbol[k], alpha[t * states + s] + beta[t * states + s]);
        }
        for (k, &occ) in per_symbol.iter().enumerate() {
            if occ != ninf {
                grad[t * vocab + k] = -(occ - log_p).exp();
            }
        }
    }

    Ok(CtcResult {
        loss: -log_p,
        grad_logprobs: Tensor::new(vec![frames, vocab], grad)?,
    })
}

/// Records the CTC loss of a `[T×V]` log-probability node as a scalar node.
pub fn ctc_loss_node<S: Scalar>(g: &mut Graph<'_, S>, logprobs: Var, labels: &LabelSequence) -> Result<Var> {
    let lp = g.to_tensor(logprobs);
    let r = ctc_loss(&lp, labels)?;
    g.custom_scalar(logprobs, r.loss, r.grad_logprobs.into_data())
}

/// Exhaustive reference: sums the probability of every length-`T` path that
/// collapses to `labels`. Limited to `V^T ≤ 10⁷`.
pub fn ctc_brute_force<S: Scalar>(logprobs: &Tensor<S>, labels: &LabelSequence) -> Result<S> {
    let (frames, vocab) = dims(logprobs)?;
    let total = (vocab as f64).powi(frames as i32);
    if total > 1e7 {
        return Err(Error::TooLarge(format!("{vocab}^{frames} paths")));
    }
    if let Some(&bad) = labels.symbols().iter().find(|&&s| s >= vocab) {
        return Err(Error::InvalidLabel {
            symbol: bad,
            max: vocab - 1,
        });
    }
    let lp = logprobs.data();
    let mut path = vec![0usize; frames];
    let mut matching = Vec::new();
    loop {
        if collapse(&path) == labels.symbols() {
            matching.push(path.iter().enumerate().map(|(t, &k)| lp[t * vocab + k]).sum::<S>());
        }
        // odometer increment
        let mut i = frames;
        loop {
            if i == 0 {
                return if matching.is_empty() {
                    Err(Error::Infeasible {
                        frames,
                        labels: labels.len(),
                        repeats: labels.repeats(),
                    })
                } else {
                    Ok(-log_sum_exp(&matching))
                };
            }
            i -= 1;
            path[i] += 1;
            if path[i] < vocab {
                break;
            }
            path[i] = 0;
        }
    }
}

/// Removes adjacent repeats, then blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Best-path decoding: per-frame argmax (lowest index on ties), then collapse.
pub fn greedy_decode<S: Scalar>(logprobs: &Tensor<S>) -> LabelSequence {
    let vocab = logprobs.cols();
    let path: Vec<usize> = logprobs
        .data()
        .chunks(vocab)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    LabelSequence(collapse(&path))
}

fn dims<S: Scalar>(logprobs: &Tensor<S>) -> Result<(usize, usize)> {
    if logprobs.shape().len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "CTC expects [T×V] log-probabilities, got {:?}",
            logprobs.shape()
        )));
    }
    Ok((logprobs.rows(), logprobs.cols()))
}

fn extend(labels: &LabelSequence) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &k in labels.symbols() {
        ext.push(k);
        ext.push(BLANK);
    }
    ext
}

#[inline]
fn skip_allowed(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}
