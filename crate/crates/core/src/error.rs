//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor was constructed with an extent of zero or a data buffer whose
    /// length does not match the shape product.
    #[error("invalid tensor shape {shape:?} for buffer of length {len}")]
    InvalidShape { shape: Vec<usize>, len: usize },

    /// Two operands have incompatible shapes for the requested operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A label id is outside the valid gloss range `1..=vocab`.
    #[error("label id {id} outside valid range 1..={vocab} (0 is reserved for blank)")]
    InvalidLabel { id: usize, vocab: usize },

    /// The temporal input is too short for the sequence head.
    #[error("input length {got} below the minimum of {min} frames required by the conv/pool stack")]
    SequenceTooShort { got: usize, min: usize },

    /// The brute-force CTC oracle would have to enumerate too many paths.
    #[error("oracle too large: {paths} paths exceed the limit of {limit}")]
    OracleTooLarge { paths: u128, limit: u128 },

    /// Word error rate against an empty reference is undefined.
    #[error("empty reference: word error rate is undefined for ref_len = 0")]
    EmptyReference,

    /// The finite-difference checker was handed a non-scalar objective.
    #[error("grad check requires a scalar objective, got output shape {shape:?}")]
    NonScalarObjective { shape: Vec<usize> },

    /// A checkpoint directory is malformed or does not match the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A loaded checkpoint is incompatible with the requested use.
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    /// Malformed dataset directory or sample blob.
    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Attach a path to a raw io error.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
