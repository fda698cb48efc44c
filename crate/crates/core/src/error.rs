use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {context} (layer {layer}, index {index})")]
    NonFinite {
        context: &'static str,
        layer: usize,
        index: usize,
    },

    #[error("suspect model is incompatible with the verifier: {0}")]
    IncompatibleSuspect(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("batches are not paired: {0}")]
    Unpaired(String),

    #[error("bound not applicable: {0}")]
    NotApplicable(String),

    #[error("malformed {format} data: {detail}")]
    Format {
        format: &'static str,
        detail: String,
    },

    #[error("config error at line {line}: {detail}")]
    Config { line: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn format_err(format: &'static str, detail: impl Into<String>) -> Error {
    Error::Format {
        format,
        detail: detail.into(),
    }
}
