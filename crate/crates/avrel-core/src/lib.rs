//! Audio-visual speech recognition toolkit with input-corruption modeling and
//! reliability-weighted fusion, built on a small reverse-mode autodiff tensor
//! engine and trained end-to-end on a synthetic paired audio-visual dataset.

pub mod corruption;
pub mod data;
pub mod decoding;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod training;

mod kv;
pub use kv::KvFile;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("sizing error: {0}")]
    Sizing(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown id: {0}")]
    MissingId(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Marker bit separating evaluation seeds from training seeds. Training
/// rejects seeds with this bit set; evaluation always sets it, so test-set
/// corruption plans can never collide with training-time plans.
pub const TEST_SEED_BIT: u64 = 1 << 62;

/// SplitMix64-style mixer used everywhere a derived seed is needed
/// (per-clip, per-epoch corruption plans, test/train seed partitions).
pub fn mix_seed(base: u64, salt: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
