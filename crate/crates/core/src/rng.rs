//! Seed derivation. Every random draw in the crate comes from a ChaCha stream keyed by a
//! base seed plus a tag path, so independent components never share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with a path of tags into a single 64-bit seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// A fresh deterministic stream for `(seed, tags)`.
pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, tags))
}

/// Stream tags used across the crate.
pub mod tag {
    pub const TASK_BETA: u64 = 1;
    pub const TRAIN_DATA: u64 = 2;
    pub const EVAL_DATA: u64 = 3;
    pub const ENCODER_INIT: u64 = 4;
    pub const PROBE_INIT: u64 = 5;
    pub const CROSSCODER_INIT: u64 = 6;
    pub const CROSSCODER_SHUFFLE: u64 = 7;
    pub const RANDOM_PROBE: u64 = 8;
    pub const ORACLE: u64 = 9;
    pub const PLANTED: u64 = 10;
    pub const PROBE_DATA: u64 = 11;
}
