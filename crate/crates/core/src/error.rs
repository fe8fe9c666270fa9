//! Shared error type for the whole crate.
//!
//! Every failure is categorized so front-ends can map it to a process exit
//! code: configuration problems, bad input data, or numeric failures that
//! arise during computation.

use std::path::PathBuf;

use crate::trainer::TrainOutput;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Invalid configuration or arguments (exit code 2).
    Config,
    /// Malformed or inconsistent input data (exit code 3).
    Data,
    /// Numeric failure during computation (exit code 4).
    Numeric,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Numeric => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Data => "data",
            ErrorCategory::Numeric => "numeric",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected \"EMB1\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported format: {what}")]
    UnsupportedFormat { what: String },

    #[error("truncated payload: expected {expected} bytes of matrix data, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("{path}:{line}: cannot parse value: {text:?}")]
    CsvParse {
        path: PathBuf,
        line: usize,
        text: String,
    },

    #[error("{path}:{line}: invalid JSON record: {message}")]
    JsonRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("empty matrix: {context}")]
    EmptyMatrix { context: String },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("row {row} has zero norm")]
    ZeroNormRow { row: usize },

    #[error("duplicate identifier {id:?}")]
    DuplicateId { id: String },

    #[error("unknown identifier {id:?}")]
    UnknownId { id: String },

    #[error("label {index} out of range for {classes} classes")]
    LabelOutOfRange { index: usize, classes: usize },

    #[error("insufficient samples: need at least {needed}, found {found}")]
    InsufficientSamples { needed: usize, found: usize },

    #[error("invalid configuration: {what}")]
    InvalidConfig { what: String },

    #[error("normal equations are degenerate even with ridge stabilization")]
    DegenerateSystem,

    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: &'static str },

    #[error("non-finite loss at step {step}; aborted with last good state")]
    TrainDiverged {
        step: u64,
        last_good: Box<TrainOutput>,
    },

    #[error("model {model:?} is missing metric {metric:?}")]
    MissingMetric { model: String, metric: String },
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidConfig { .. } => ErrorCategory::Config,
            Error::Io { .. }
            | Error::BadMagic { .. }
            | Error::UnsupportedFormat { .. }
            | Error::TruncatedPayload { .. }
            | Error::CsvParse { .. }
            | Error::JsonRecord { .. }
            | Error::EmptyMatrix { .. }
            | Error::DimensionMismatch { .. }
            | Error::NonFinite { .. }
            | Error::DuplicateId { .. }
            | Error::UnknownId { .. }
            | Error::LabelOutOfRange { .. }
            | Error::InsufficientSamples { .. }
            | Error::MissingMetric { .. } => ErrorCategory::Data,
            Error::ZeroNormRow { .. }
            | Error::DegenerateSystem
            | Error::NonFiniteGradient { .. }
            | Error::TrainDiverged { .. } => ErrorCategory::Numeric,
        }
    }
}
