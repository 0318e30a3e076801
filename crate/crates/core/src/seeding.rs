//! Deterministic seed derivation. Every random draw in the pipeline comes
//! from a generator keyed by `(seed, stream, index)`, so a run can be resumed
//! at any step without replaying earlier draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifiers keep unrelated consumers of one seed independent.
pub mod stream {
    pub const SCENES: u64 = 1;
    pub const INIT: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const SAMPLER: u64 = 4;
    pub const LATENT: u64 = 5;
}

/// splitmix64 finalizer over a combination of both inputs.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(b)
        .wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed, stream), index))
}
