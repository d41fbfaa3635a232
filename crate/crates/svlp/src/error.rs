use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. Variants map onto the stable CLI exit codes:
/// usage/config problems exit 2, IO problems exit 3, numerical failures exit 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("l2 normalization of a zero vector")]
    ZeroNorm,

    #[error("backward requires a scalar loss, got {numel} elements")]
    NotScalar { numel: usize },

    #[error("tape already consumed by a backward pass")]
    TapeConsumed,

    #[error("unknown parameter entry `{0}`")]
    UnknownEntry(String),

    #[error("duplicate parameter entry `{0}`")]
    DuplicateEntry(String),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("unknown class name `{0}` (expected `real` or `spoof`)")]
    UnknownClass(String),

    #[error("unknown domain id {0}")]
    UnknownDomain(usize),

    #[error("label {0} out of range")]
    LabelRange(usize),

    #[error("selection fraction p must lie in (0, 1], got {0}")]
    SelectionFraction(f64),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("rehearsal-free violation: domain {expected} training read a sample tagged {found}")]
    RehearsalViolation { expected: usize, found: usize },

    #[error("non-deterministic loss function: two evaluations of the same state differ")]
    NonDeterministicLoss,

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    /// Wrap an IO error with the path it occurred on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
