//! Seed derivation shared by every stochastic component.
//!
//! All generators are `ChaCha8Rng`. Sub-streams are derived from a base seed
//! and a stream index with one SplitMix64 round over `base ^ (stream * φ)`,
//! so external tools can reproduce any stream from the two integers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Mixes `base` and `stream` into an independent 64-bit seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream_rng(base: u64, stream: u64) -> ChaCha8Rng {
    rng_from(derive_seed(base, stream))
}
