//! Stable seed derivation.
//!
//! Every sample, revision step and simulated question gets its own seed,
//! derived from the run seed by hashing. SHA-256 is used instead of
//! `std::hash` because the std hashers are not stable across releases, and
//! recorded seeds must reproduce the same draws forever.

use sha2::{Digest, Sha256};

/// Seed for one parallel sample.
pub fn sample_seed(run_seed: u64, question_id: &str, sample_index: u32) -> u64 {
    derive(run_seed, question_id, &[u64::from(sample_index)])
}

/// Seed for one revision step of the chain rooted at `sample_index`.
pub fn step_seed(run_seed: u64, question_id: &str, sample_index: u32, step: u32) -> u64 {
    derive(
        run_seed,
        question_id,
        &[u64::from(sample_index), u64::from(step)],
    )
}

/// Hashes the run seed, a string key and any number of integer parts.
pub fn derive(run_seed: u64, key: &str, parts: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(run_seed.to_le_bytes());
    hasher.update((key.len() as u64).to_le_bytes());
    hasher.update(key.as_bytes());
    for part in parts {
        hasher.update(part.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

/// Hex SHA-256 of a byte string.
pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
