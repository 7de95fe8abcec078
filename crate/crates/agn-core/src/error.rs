use thiserror::Error;

/// Errors surfaced by tensor ops, model construction, training and file formats.
#[derive(Error, Debug)]
pub enum AgnError {
    #[error("shape mismatch: {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("training aborted at iteration {iteration}: {reason}")]
    TrainingAborted { iteration: usize, reason: String },
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl AgnError {
    pub fn shape(context: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        AgnError::ShapeMismatch {
            context: context.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        AgnError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, AgnError>;
