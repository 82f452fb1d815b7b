//! Seed derivation.
//!
//! Every stochastic stream (a training step, a prefetched batch, a synthesized
//! file) gets its own ChaCha8 generator seeded from a SHA-256 of the master
//! seed, a purpose tag and an index. Streams are therefore independent of the
//! order in which they are created, which keeps parallel workers and resumed
//! runs reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(master: u64, tag: &str, index: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    h.finalize().into()
}

pub fn derived_rng(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(master, tag, index))
}

/// A derived 64-bit seed.
pub fn derived_u64(master: u64, tag: &str, index: u64) -> u64 {
    let d = derive_seed(master, tag, index);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Stable 64-bit hash of a file name.
pub fn name_hash(name: &str) -> u64 {
    let d = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Per-file seed from the master seed and the file name.
pub fn file_seed(master: u64, name: &str) -> u64 {
    derived_u64(master, "file", name_hash(name))
}
