//! Experiment harness: configuration, seeded sweep runner, figure-data
//! emission, and the acceptance checks behind the `ccq` binary.

pub mod acceptance;
pub mod config;
pub mod figures;
pub mod runner;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] ccq_core::Error),

    #[error("size guard: {0}")]
    SizeGuard(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// FNV-1a 64-bit digest, hex-encoded. Used to fingerprint resolved configs
/// in run manifests.
pub fn digest(text: &str) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}
