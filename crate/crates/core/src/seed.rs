//! Deterministic seed derivation.
//!
//! Every random stream in a run is keyed off the run seed plus a purpose tag
//! and up to two counters (stage, sample index). Streams never share state, so
//! draws for one sample cannot shift the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for derived streams.
pub mod tag {
    pub const TEACHER_INIT: u64 = 1;
    pub const TEACHER_SHUFFLE: u64 = 2;
    pub const GENERATOR_INIT: u64 = 3;
    pub const GENERATOR_NOISE: u64 = 4;
    pub const STUDENT_INIT: u64 = 5;
    pub const STUDENT_SHUFFLE: u64 = 6;
    pub const STAGE_NOISE: u64 = 7;
    pub const LABEL: u64 = 8;
    pub const FINETUNE_NOISE: u64 = 9;
    pub const DATA: u64 = 10;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a run seed, a purpose tag and two counters into a 64-bit stream seed.
pub fn derive(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ tag);
    h = splitmix64(h ^ a);
    splitmix64(h ^ b)
}

pub fn rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag, a, b))
}

/// Per-sample label stream: one independent generator per (run, stage, sample).
pub fn label_rng(seed: u64, stage: usize, index: usize) -> ChaCha8Rng {
    rng(seed, tag::LABEL, stage as u64, index as u64)
}
