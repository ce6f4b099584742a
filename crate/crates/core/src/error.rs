use std::path::PathBuf;

use thiserror::Error;

use crate::image::Image;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("weight file format error: {0}")]
    Format(String),

    #[error("incompatible weights for layer `{layer}`: {reason}")]
    IncompatibleWeights { layer: String, reason: String },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("fit error: {0}")]
    Fit(String),

    /// An iterative optimizer produced a non-finite objective or image.
    /// Carries the last iterate that was still finite.
    #[error("optimization diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        last_stable: Box<Image>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ::image::ImageError,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
