use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("the exact Heaviside function has no usable derivative")]
    UnsupportedDerivative,

    #[error("unsupported energy term: {0}")]
    UnsupportedTerm(&'static str),

    #[error("class {class} is present in the ground truth but the prediction has only {available} classes")]
    InconsistentClasses { class: u16, available: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u16, classes: usize },

    #[error("mean IoU is undefined: every class is empty")]
    UndefinedMetric,

    #[error("activation cache is stale (cache version {cache}, network version {net})")]
    StaleCache { cache: u64, net: u64 },

    #[error("non-finite gradient in layer {layer} at parameter {index}")]
    NonFiniteGradient { layer: usize, index: usize },

    #[error("iteration {iter} exceeds max_iter {max_iter}")]
    IterationOutOfRange { iter: usize, max_iter: usize },

    #[error("training diverged at iteration {iter}")]
    Diverged {
        iter: usize,
        /// Parameters after the last finite update.
        last_good: Box<crate::tinynet::TinyNet>,
    },

    #[error("malformed file at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
