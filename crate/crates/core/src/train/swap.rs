use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vocab;

/// Random replacement of decoder input tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SwapPolicy {
    /// Probability that an eligible position is replaced.
    pub proportion: f64,
    /// Ids that are neither replaced nor used as replacements.
    pub sentinel_ids: Vec<u32>,
    pub seed: u64,
}

impl SwapPolicy {
    pub fn new(proportion: f64, seed: u64) -> Self {
        Self {
            proportion,
            sentinel_ids: (0..vocab::FIRST_PIECE).collect(),
            seed,
        }
    }

    fn is_sentinel(&self, id: u32) -> bool {
        self.sentinel_ids.contains(&id)
    }
}

/// Replaces each non-sentinel token with probability `proportion` by a
/// different non-sentinel id drawn uniformly from `0..vocab_size`. Returns
/// the perturbed tokens and the number of replaced positions.
pub fn token_swap(tokens: &[u32], vocab_size: usize, policy: &SwapPolicy) -> Result<(Vec<u32>, usize)> {
    let p = policy.proportion;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Proportion(p));
    }
    let pool: Vec<u32> = (0..vocab_size as u32).filter(|&id| !policy.is_sentinel(id)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let mut swapped = 0;
    let out = tokens
        .iter()
        .map(|&id| {
            if policy.is_sentinel(id) || pool.len() < 2 || !rng.random_bool(p) {
                return id;
            }
            swapped += 1;
            loop {
                let r = pool[rng.random_range(0..pool.len())];
                if r != id {
                    return r;
                }
            }
        })
        .collect();
    Ok((out, swapped))
}
