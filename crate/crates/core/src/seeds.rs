//! Deterministic seed derivation for named random sub-streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a child seed from a parent seed and a stream label.
pub fn derive(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

/// Derives a child seed from a parent seed and an index (e.g. a scene id).
pub fn derive_indexed(seed: u64, label: &str, index: u64) -> u64 {
    derive(derive(seed, label), &index.to_string())
}

pub fn rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, label))
}
