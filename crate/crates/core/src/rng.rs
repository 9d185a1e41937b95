//! Seeded random streams.
//!
//! All randomness flows through ChaCha8 (a counter-based stream cipher with a
//! published specification). A run seed plus a stream name selects a
//! 256-bit key via SHA-256, so independent consumers (parameter init,
//! corruption of annotator 2, the epoch-3 shuffle, ...) never share draws
//! and adding a new consumer never perturbs an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Generator for the stream `name` under `seed`.
pub fn stream(seed: u64, name: &str) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let key: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(key)
}

/// Generator for the `index`-th member of a family of streams.
pub fn indexed(seed: u64, name: &str, index: u64) -> Rng {
    stream(seed, &format!("{name}/{index}"))
}

/// A `u64` seed for a downstream consumer named `name`.
pub fn derive(seed: u64, name: &str) -> u64 {
    use rand::RngCore;
    stream(seed, name).next_u64()
}
