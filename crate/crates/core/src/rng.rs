//! Deterministic RNG stream derivation.
//!
//! Everything random in the crate is seeded through these helpers so that a
//! master seed plus a structural index (cell, batch element, episode, cycle)
//! fully determines the stream, independent of thread scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates structured (seed, index) pairs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a stream index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix(seed ^ mix(index))
}

/// RNG for a derived stream.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, index))
}

/// RNG seeded directly from a master seed.
pub fn master_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
