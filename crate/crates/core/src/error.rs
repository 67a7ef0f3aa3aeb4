use thiserror::Error;

/// Errors raised across the toolkit.
///
/// The harness maps these onto process exit codes, so the variants are
/// grouped by who is at fault: configuration, input data, or training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("compatibility error: {0}")]
    Compatibility(String),
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("training diverged at step {step} (last finite loss {last_finite_loss})")]
    Divergence { step: u64, last_finite_loss: f32 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
