use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Sorts utterance indices by length, cuts consecutive runs of `m`, and
/// shuffles the order of the runs. The last run may be shorter.
pub fn make_batches<R: Rng + ?Sized>(lengths: &[usize], m: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if lengths.is_empty() {
        return Err(Error::InvalidArgument("cannot batch an empty split".into()));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let mut batches: Vec<Vec<usize>> = order.chunks(m).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    Ok(batches)
}

/// Endless source of full batches over one split.
///
/// Walks [`make_batches`] passes back to back, reshuffling between passes.
/// A short batch is topped up to `m` with indices drawn uniformly with
/// replacement, so every step sees exactly `m` utterances.
#[derive(Debug, Clone)]
pub struct BatchStream {
    lengths: Vec<usize>,
    m: usize,
    rng: ChaCha8Rng,
    pending: Vec<Vec<usize>>,
    passes: usize,
    per_pass: usize,
}

impl BatchStream {
    pub fn new(lengths: Vec<usize>, m: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pending = make_batches(&lengths, m, &mut rng)?;
        let per_pass = pending.len();
        pending.reverse();
        Ok(Self {
            lengths,
            m,
            rng,
            pending,
            passes: 0,
            per_pass,
        })
    }

    /// Batches in one pass over the split.
    pub fn batches_per_pass(&self) -> usize {
        self.per_pass
    }

    /// Completed passes over the split.
    pub fn passes(&self) -> usize {
        self.passes
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pending.is_empty() {
            self.passes += 1;
            self.pending = make_batches(&self.lengths, self.m, &mut self.rng).expect("validated at construction");
            self.pending.reverse();
        }
        let mut batch = self.pending.pop().expect("refilled above");
        while batch.len() < self.m {
            batch.push(self.rng.random_range(0..self.lengths.len()));
        }
        batch
    }
}
