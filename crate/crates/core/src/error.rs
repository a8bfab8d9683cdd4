use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape, size, channel count).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("missing map `{map}` in {}", dir.display())]
    MissingMap { map: String, dir: PathBuf },

    #[error("conditional model requires a condition pattern")]
    PatternRequired,

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("schema mismatch: expected `{expected}`, found `{found}`")]
    Schema { expected: String, found: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { path: path.into(), message: message.into() }
    }

    /// Short machine-parsable category used by the command line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::MissingMap { .. } => "missing-map",
            Error::PatternRequired => "pattern-required",
            Error::Config { .. } => "config",
            Error::Schema { .. } => "schema",
            Error::NonFinite(_) => "non-finite",
            Error::Image(_) => "image",
            Error::Json(_) => "config",
            Error::Io(_) => "io",
        }
    }
}
