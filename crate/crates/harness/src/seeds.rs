//! Per-case seed derivation.
//!
//! A case seed is the first eight bytes (little-endian) of
//! `SHA-256("{base}:{experiment}:{d}:{case}")`, so results never depend on the
//! order in which a worker pool schedules cases.

use sha2::{Digest, Sha256};

pub fn case_seed(base: u64, experiment: &str, d: usize, case: usize) -> u64 {
    let digest = Sha256::digest(format!("{base}:{experiment}:{d}:{case}").as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}
