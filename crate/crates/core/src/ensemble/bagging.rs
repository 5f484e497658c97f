//! Bootstrap resampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` indices drawn uniformly with replacement from `0..n`.
pub fn bootstrap_sample(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}
