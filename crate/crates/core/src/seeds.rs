//! Stage seeds derived from one global seed.

use sha2::{Digest, Sha256};

/// First eight bytes (little-endian) of `sha256(global || stage || index)`.
pub fn derive_seed(global: u64, stage: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update((stage.len() as u64).to_le_bytes());
    h.update(stage.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
