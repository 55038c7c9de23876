//! Seed plumbing. Every random choice in the crate flows through a ChaCha8
//! stream derived from (run seed, subsystem tag), so artifacts are identical
//! across runs, platforms, and dependency bumps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Deterministic RNG for a (seed, tag) pair. Distinct tags give independent
/// streams, so adding a consumer never shifts the draws of another.
pub fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ fnv1a(tag)))
}

/// Tagged stream with a numeric lane, for per-layer or per-topic draws.
pub fn stream_n(seed: u64, tag: &str, lane: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ fnv1a(tag) ^ splitmix(lane)))
}
