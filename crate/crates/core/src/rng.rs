//! Seed derivation.
//!
//! Every source of randomness in an experiment flows from one top-level seed
//! through named sub-seeds, so each component (stream shuffle, weight init,
//! adaptation, projection) can be reproduced in isolation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive a stable sub-seed from `(seed, tag)`.
///
/// FNV-1a over the tag bytes, folded with the seed. Stable across platforms
/// and releases; do not change the constants.
pub fn named_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in tag.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A deterministic generator for the given `(seed, tag)` pair.
pub fn named_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(named_seed(seed, tag))
}
