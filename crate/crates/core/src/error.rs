use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("cannot differentiate through {op}")]
    Unsupported { op: &'static str },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("corrupt RLE stream: {0}")]
    CorruptRle(String),

    #[error("malformed JSON at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("schema violation in field `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {diagnostic}")]
    Diverged { step: u64, diagnostic: String },

    #[error("grounder failure: {0}")]
    Grounder(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dimension { .. }
                | Error::Config(_)
                | Error::Validation(_)
                | Error::CorruptRle(_)
                | Error::Parse { .. }
                | Error::Schema { .. }
                | Error::Json(_)
        ) || matches!(self, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}
