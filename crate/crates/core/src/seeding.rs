//! Deterministic derivation of independent random streams.
//!
//! Every stochastic routine takes an explicit `ChaCha8Rng`. Streams for
//! sub-tasks (a training step, a batch item, an evaluation seed) are derived
//! from a parent seed and a list of integer labels so that results never depend
//! on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `labels` into `seed`, yielding a new 64-bit seed.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix64(seed), |acc, &l| splitmix64(acc ^ splitmix64(l)))
}

pub fn rng_from(seed: u64, labels: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, labels))
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn standard_normal_vec(rng: &mut Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Stream labels used across the crate.
pub mod stream {
    pub const PRETRAIN_DATA: u64 = 1;
    pub const PAIRS: u64 = 2;
    pub const INIT: u64 = 3;
    pub const STEP_BATCH: u64 = 4;
    pub const STEP_LOSS: u64 = 5;
    pub const MONITOR: u64 = 6;
    pub const SAMPLING: u64 = 7;
    pub const ACCURACY: u64 = 8;
    pub const PROFILE: u64 = 9;
}
