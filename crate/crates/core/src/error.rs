use std::path::PathBuf;

use crate::trace_store::BundleError;

/// Errors raised by the analysis pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Bundle(#[from] BundleError),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("step {0} has no scorable tokens")]
    EmptyStep(usize),

    #[error("layer {0} is not present in the bundle")]
    MissingLayer(usize),

    #[error("missing data: {0}")]
    Missing(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error(
        "oracle is not monotone: failure({lo_k}) = {lo_value} > failure({hi_k}) = {hi_value}"
    )]
    Monotonicity {
        lo_k: usize,
        lo_value: f64,
        hi_k: usize,
        hi_value: f64,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("CSV error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
