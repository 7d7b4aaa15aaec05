//! Deterministic RNG derivation.
//!
//! Every randomized stage of the pipeline draws from a ChaCha stream derived
//! from the experiment seed plus a stage tag, so that independent stages are
//! decorrelated and any run replays bit-identically from its config.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stage tags for RNG stream derivation.
pub mod stream {
    pub const SYNTH: u64 = 0x01;
    pub const SPLIT: u64 = 0x02;
    pub const PLACEMENT: u64 = 0x03;
    pub const GUMBEL: u64 = 0x04;
    pub const TRAIN: u64 = 0x05;
    pub const MODEL_INIT: u64 = 0x06;
    pub const DEFENSE: u64 = 0x07;
    pub const EVAL: u64 = 0x08;
    pub const PERCEPTUAL: u64 = 0x09;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with a sequence of tags into a single stream seed.
pub fn mix(seed: u64, tags: &[u64]) -> u64 {
    let mut acc = splitmix64(seed);
    for &t in tags {
        acc = splitmix64(acc ^ splitmix64(t));
    }
    acc
}

/// Derive an independent RNG for `(seed, tags)`.
pub fn rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tags))
}
