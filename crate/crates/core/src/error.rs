//! Crate-wide error type. Variants map onto the CLI exit-code contract:
//! data/format problems exit 2, numeric failures (NaN/Inf) exit 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    NotFound(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("input too short: {0}")]
    TooShort(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("missing tensor: {0}")]
    MissingTensor(String),

    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("unknown speaker '{name}', available: {available}")]
    UnknownSpeaker { name: String, available: String },

    #[error("duplicate speaker: {0}")]
    DuplicateSpeaker(String),

    #[error("empty manifest: {0}")]
    EmptyManifest(String),

    #[error("too few speakers: {0}")]
    TooFewSpeakers(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("missing f0 contour: {0}")]
    MissingF0(String),

    #[error("generation state mismatch: {0}")]
    StateMismatch(String),

    #[error("non-finite value detected in {0}")]
    NonFinite(String),

    #[error("i/o error on {path}: {source}")]
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

    /// Exit code class for the CLI: 2 for data/format errors, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
