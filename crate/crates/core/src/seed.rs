//! Stable hashing and RNG stream derivation.
//!
//! Every random draw in the harness comes from a ChaCha stream keyed by
//! `(seed, tag)`, so independent operations never share state and results do
//! not depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// 64-bit digest of length-prefixed parts; stable across platforms and runs.
pub fn stable_hash64(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Maps a hash to `[0, 1)` using its top 53 bits.
pub fn unit_interval(hash: u64) -> f64 {
    (hash >> 11) as f64 / (1u64 << 53) as f64
}

pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    stable_hash64(&[&seed.to_le_bytes(), tag.as_bytes()])
}

pub fn stream(seed: u64, tag: &str) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, tag))
}
