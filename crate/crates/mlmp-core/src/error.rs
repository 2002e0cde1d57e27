use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum MlmpError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("zero-norm row {row} cannot be normalized")]
    ZeroNormRow { row: usize },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("unknown name {name:?}; valid options are: {valid}")]
    UnknownName { name: String, valid: String },

    #[error("dataset error for {path}: {message}")]
    Dataset { path: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: String, message: String },

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl MlmpError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        MlmpError::InvalidArgument(msg.into())
    }

    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        MlmpError::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        MlmpError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, MlmpError>;
