//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A line of a JSONL file failed to parse.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A document (or other value) violated a structural invariant.
    #[error("validation error for {id}: {message}")]
    Validation { id: String, message: String },

    /// A configuration value is unusable.
    #[error("config error: {0}")]
    Config(String),

    /// A sampling strategy cannot be satisfied by the corpus.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// An input sequence cannot be built (e.g. question alone exceeds the cap).
    #[error("input error: {0}")]
    Input(String),

    /// Two values that must describe the same thing do not.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// A tensor op or optimizer step produced or received a non-finite value.
    #[error("numeric error in {op}: non-finite value")]
    NonFinite { op: String },

    /// Tensor shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Checkpoint or data file is structurally broken.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs rather than runtime failures.
    /// The CLI maps these to exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation { .. }
                | Error::Config(_)
                | Error::Sampling(_)
                | Error::Input(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
