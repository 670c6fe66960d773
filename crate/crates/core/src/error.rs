//! Crate-wide error type.
//!
//! Every error carries enough context to name the offending tensor, file,
//! or record. `ErrorClass` partitions errors into the three non-success
//! exit codes used by the CLI.

use std::path::PathBuf;

/// Coarse error category, mapped 1:1 onto CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad invocation: unknown flag, missing argument, malformed flag value.
    Usage,
    /// Bad data: invariant violation, malformed file, missing checkpoint.
    Data,
    /// Numeric failure: NaN loss, degenerate regression.
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed container in {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("unsupported dtype {dtype:?} for tensor {name} at byte offset {offset}")]
    UnsupportedDtype {
        name: String,
        dtype: String,
        offset: u64,
    },

    #[error("payload length mismatch for tensor {name} at byte offset {offset}: shape {shape:?} needs {expected} bytes, found {found}")]
    PayloadMismatch {
        name: String,
        offset: u64,
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },

    #[error("duplicate tensor name {0}")]
    DuplicateTensor(String),

    #[error("invalid tensor {name}: {reason}")]
    InvalidTensor { name: String, reason: String },

    #[error("shape mismatch for tensor {name}: {left:?} vs {right:?}")]
    ShapeMismatch {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("missing tensor {name} in checkpoint {ckpt}")]
    MissingTensor { name: String, ckpt: String },

    #[error("unknown checkpoint id {0}")]
    UnknownCheckpoint(String),

    #[error("grid cell ({domain}, {phase}) already registered")]
    DuplicateCell { domain: String, phase: String },

    #[error("grid cell ({domain}, {phase}) not found")]
    MissingCell { domain: String, phase: String },

    #[error("invalid recipe: {0}")]
    InvalidRecipe(String),

    #[error("vocabulary union failed for tensor {name}: {reason}")]
    VocabUnion { name: String, reason: String },

    #[error("parse error at {path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("evaluation failed: {0}")]
    Eval(String),

    #[error("evaluation failed at lambda {lambda}: {source}")]
    SweepEval {
        lambda: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("degenerate regression: {0}")]
    DegenerateRegression(String),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Numeric(_) | Error::DegenerateRegression(_) => ErrorClass::Numeric,
            Error::SweepEval { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
