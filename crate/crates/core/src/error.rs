use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
///
/// Variants are grouped so the CLI can map them onto its exit-code contract
/// with [`Error::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("unknown volume format `{0}`")]
    UnknownFormat(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite loss {value} at epoch {epoch}, step {step}")]
    NonFiniteLoss { value: f64, epoch: usize, step: usize },

    #[error("gradient check failed: relative error {rel_error:.3e} at {path}")]
    GradientCheck { rel_error: f64, path: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Process exit code: 2 config, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Shape(_)
            | Error::MalformedHeader { .. }
            | Error::UnknownFormat(_)
            | Error::Data(_)
            | Error::Io { .. } => 3,
            Error::NonFiniteLoss { .. } | Error::GradientCheck { .. } => 4,
        }
    }
}
