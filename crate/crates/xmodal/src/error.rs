//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("{context}: need at least {needed} items, got {got}")]
    InsufficientData {
        context: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:.3e})")]
    NotSymmetric { max_asymmetry: f64 },

    #[error("Cholesky factorization failed at pivot {pivot}")]
    FactorizationFailed { pivot: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed file {path}: {what} at byte offset {offset}")]
    MalformedFile {
        path: PathBuf,
        offset: u64,
        what: String,
    },

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("pixel index ({h}, {w}, {c}) out of range for shape {shape:?}")]
    PixelOutOfRange {
        h: usize,
        w: usize,
        c: usize,
        shape: (usize, usize, usize),
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
