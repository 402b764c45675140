//! Crate-wide error types.

use thiserror::Error;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Errors from tensor math and model forward passes.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid axis {axis} for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("{0}")]
    Invalid(String),
}

/// Errors from the bitstream container and the end-to-end codec.
#[derive(Debug, Error)]
pub enum CodecError {
    #[error("bad magic bytes (not an AIFC container)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    Version(u8),
    #[error("payload checksum mismatch")]
    ChecksumMismatch,
    #[error("truncated container: {0}")]
    Truncated(String),
    #[error("configuration hash mismatch: container requires {expected:016x}, have {actual:016x}")]
    ConfigMismatch { expected: u64, actual: u64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("internal invariant breached: {0}")]
    Internal(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
