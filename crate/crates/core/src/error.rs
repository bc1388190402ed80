use std::path::PathBuf;

/// All failure modes surfaced by the library.
///
/// The CLI maps `Numerical` to exit code 3 and everything else to exit
/// code 2, so the distinction between "your input is bad" and "the math
/// blew up" is load-bearing.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration (bad field values, inconsistent sections).
    #[error("config: {0}")]
    Config(String),

    /// I/O failure with the offending path attached.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file contents: bad magic, truncated payload, checksum
    /// mismatch, out-of-range field, trailing garbage.
    #[error("format: {0}")]
    Format(String),

    /// A structurally valid request that cannot be satisfied by the data
    /// (empty sampling pool, index out of bounds, missing slide, ...).
    #[error("{0}")]
    Domain(String),

    /// Non-finite loss/statistic during training or evaluation.
    #[error("numerical: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(format!("json: {e}"))
    }
}
