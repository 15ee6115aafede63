//! Stateless seed derivation. Every random draw in training is keyed by
//! `(seed, purpose, indices...)`, so resuming from a checkpoint needs only the
//! base seed and the step counter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix(seed), |acc, &k| splitmix(acc ^ splitmix(k)))
}

pub fn derive_rng(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, keys))
}

/// Purpose tags mixed into derived seeds.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const MASK: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const CROP: u64 = 4;
    pub const GRADCHECK: u64 = 5;
    pub const PROBE: u64 = 6;
}
