//! Deterministic RNG streams. Every random draw in the crate goes through
//! a ChaCha8 stream keyed by `(seed, label)`, so substreams are independent
//! of each other and of evaluation order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a; stable across platforms and compiler versions, unlike
/// `DefaultHasher`.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Independent stream for `(seed, label)`.
pub fn stream_rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(label))
}

/// Independent stream for `(seed, label, index)`; used for per-sample and
/// per-epoch substreams.
pub fn indexed_rng(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(label) ^ index.wrapping_mul(0x9e3779b97f4a7c15))
}
