use std::path::PathBuf;

/// Errors raised anywhere in the texture pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An array extent does not match what the operation expects.
    #[error("dimension error on {axis}: {message}")]
    Dimension { axis: String, message: String },

    /// A precondition on an argument or configuration value failed.
    #[error("validation error: {0}")]
    Validation(String),

    /// A computation diverged or produced non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A binary feature file or model bundle could not be decoded.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    /// A configuration file or command-line value is malformed.
    #[error("config error: {0}")]
    Config(String),

    /// The requested feature is not available for this backbone.
    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("image error in {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Wraps an error with the evaluation round that raised it.
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(axis: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Dimension {
            axis: axis.into(),
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Error::Validation(message.into())
    }

    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_round(self, round: usize) -> Self {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) => 4,
            Error::Round { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}
