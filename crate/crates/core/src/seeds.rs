//! Seed derivation for reproducible sub-streams.
//!
//! Every random decision in the engine draws from a ChaCha generator seeded
//! through [`derive`], so a run is fully determined by one root seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche for combining seed words.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a root seed, a purpose tag, and context words.
pub fn derive(root: u64, tag: &str, words: &[u64]) -> u64 {
    let mut h = mix(root);
    for b in tag.as_bytes() {
        h = mix(h ^ u64::from(*b));
    }
    for w in words {
        h = mix(h ^ *w);
    }
    h
}

/// A ChaCha8 generator for the derived stream.
pub fn rng(root: u64, tag: &str, words: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, tag, words))
}
