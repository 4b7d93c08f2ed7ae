use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid sketch spec: {0}")]
    InvalidSpec(String),

    #[error("operation {op} is not supported for {kind} sketches")]
    UnsupportedKind {
        op: &'static str,
        kind: &'static str,
    },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("stale message: expected round {expected}, got {got}")]
    StaleRound { expected: u64, got: u64 },

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("attack diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        detail: detail.into(),
    }
}
