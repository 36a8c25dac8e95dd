//! Seeded random streams.
//!
//! Every random draw in the crate flows from a single `u64` seed through a
//! named substream, so adding a new consumer never perturbs the draws seen
//! by existing ones. The stream key is `SHA-256(seed || name)`, truncated
//! to the ChaCha key size.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Deterministic RNG for the substream `name` of `seed`.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
