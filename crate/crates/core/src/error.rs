use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("degenerate bandwidth: all points coincide")]
    DegenerateBandwidth,

    #[error("degenerate feature: row {row} has zero norm")]
    DegenerateFeature { row: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("similarity matrix is not symmetric at ({0}, {1})")]
    Asymmetric(usize, usize),

    #[error("edge endpoint {endpoint} out of range for {nodes} nodes")]
    InvalidEndpoint { endpoint: usize, nodes: usize },

    #[error("missing adaptation layer {0}")]
    MissingLayer(usize),

    #[error("insufficient pairs: need {needed} {kind}, found {found}")]
    InsufficientPairs {
        kind: &'static str,
        needed: usize,
        found: usize,
    },

    #[error("both genuine and impostor pairs are required")]
    SingleClass,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("stage order violation: {0}")]
    StageOrder(String),

    #[error("pseudo-labeling produced no clusters (lower lambda or min_size)")]
    PseudoLabelFailure,

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(
        context: impl Into<String>,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
