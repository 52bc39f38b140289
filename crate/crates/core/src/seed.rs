//! Root-seed stream splitting.
//!
//! Every stochastic component gets its own seed derived from the run's root
//! seed and a stable label, so adding or reordering components never shifts
//! another component's stream. The derivation is the first eight bytes
//! (little-endian) of `SHA-256(root_le_bytes || label_utf8)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// ChaCha8 generator for a labelled sub-stream of `root`.
pub fn stream_rng(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label))
}
