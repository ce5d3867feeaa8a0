use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("{op}: probability {value} at index {index} is outside [0, 1]")]
    ProbabilityOutOfRange {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {id} is outside the vocabulary of size {size}")]
    OutOfVocabulary { id: usize, size: usize },

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("missing header")]
    MissingHeader,

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: String, expected: String },

    #[error("line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("checksum mismatch: file is corrupt or truncated")]
    Checksum,

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("checkpoint is missing parameters: {}", .0.join(", "))]
    MissingParameters(Vec<String>),

    #[error("checkpoint has unexpected parameters: {}", .0.join(", "))]
    UnexpectedParameters(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid_shape(
        op: &'static str,
        shape: &[usize],
        reason: impl Into<String>,
    ) -> Self {
        Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: reason.into(),
        }
    }
}
