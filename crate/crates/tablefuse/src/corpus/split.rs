//! Deterministic train/validation splitting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::Document;
use crate::error::{Error, Result};

/// Split a corpus into train and two validation sets. Validation sizes are
/// floored; the remainder goes to train. Disjoint and exhaustive.
pub fn split_corpus(
    corpus: &[Document],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<Document>, Vec<Document>, Vec<Document>)> {
    let (train, val1, val2) = fractions;
    for f in [train, val1, val2] {
        if f < 0.0 {
            return Err(Error::Config(format!("split fraction {f} must be >= 0")));
        }
    }
    if train <= 0.0 {
        return Err(Error::Config("train fraction must be > 0".into()));
    }
    // The validation fractions are exact (floored); train is the remainder,
    // so the three may sum to slightly under 1 (e.g. 0.9/0.04/0.04).
    let sum = train + val1 + val2;
    if sum > 1.0 + 1e-9 {
        return Err(Error::Config(format!("split fractions sum to {sum} > 1")));
    }

    let n = corpus.len();
    let n_val1 = (n as f64 * val1).floor() as usize;
    let n_val2 = (n as f64 * val2).floor() as usize;

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut idx_val1: Vec<usize> = order[..n_val1].to_vec();
    let mut idx_val2: Vec<usize> = order[n_val1..n_val1 + n_val2].to_vec();
    let mut idx_train: Vec<usize> = order[n_val1 + n_val2..].to_vec();
    idx_val1.sort_unstable();
    idx_val2.sort_unstable();
    idx_train.sort_unstable();

    let take = |idx: &[usize]| idx.iter().map(|&i| corpus[i].clone()).collect();
    Ok((take(&idx_train), take(&idx_val1), take(&idx_val2)))
}
