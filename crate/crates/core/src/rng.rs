//! Counter-style keyed random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream whose key is the
//! SHA-256 of `(domain, seed, index)`. Streams are therefore independent of
//! the order in which they are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type KeyedRng = ChaCha8Rng;

pub fn keyed_rng(seed: u64, domain: &str, index: u64) -> KeyedRng {
    let mut h = Sha256::new();
    h.update(domain.as_bytes());
    h.update([0u8]);
    h.update(seed.to_le_bytes());
    h.update(index.to_le_bytes());
    let key: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(key)
}

/// Derives a child seed from a parent seed and a label.
pub fn derive_seed(seed: u64, domain: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(b"derive");
    h.update(domain.as_bytes());
    h.update([0u8]);
    h.update(seed.to_le_bytes());
    h.update(index.to_le_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}
