//! Deterministic named random streams.
//!
//! All randomness in a pipeline flows from one root seed. Each consumer
//! derives its own independent stream by name, so adding a new randomized
//! step never perturbs the draws of an existing one.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a reproducible RNG for `(seed, name)`.
pub fn stream_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(name.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(key)
}
