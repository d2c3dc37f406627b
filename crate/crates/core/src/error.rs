use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("a label is required for {0} gradients")]
    MissingLabel(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("epoch {0} is already checkpointed or not after the last checkpoint")]
    DuplicateEpoch(usize),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("malformed {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },
    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn format_err(kind: &'static str, reason: impl Into<String>) -> Error {
    Error::Format {
        kind,
        reason: reason.into(),
    }
}
