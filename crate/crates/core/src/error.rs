use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("gradient requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("variable belongs to a different tape")]
    ForeignTape,

    #[error("cannot differentiate with respect to a constant (input #{index})")]
    NotDifferentiable { index: usize },

    #[error("loss does not depend on input #{index}; it is detached or unused")]
    Disconnected { index: usize },

    #[error("parameter structure mismatch: {0}")]
    Structure(String),

    #[error("input dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("non-finite loss at stream step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("infeasible suite: {0}")]
    InfeasibleSuite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by numeric blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::NonFiniteLoss { .. })
    }
}
