use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inputs or configuration violate a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// A manifest row could not be turned into an image.
    #[error("ingestion error at manifest row {row} ({path}): {reason}")]
    Ingestion {
        row: usize,
        path: PathBuf,
        reason: String,
    },

    /// A quantity left its mathematical domain (zero norm, non-finite value).
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    /// Multilevel thresholding could not split the histogram.
    #[error("segmentation failure: {0}")]
    Segmentation(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss} (similarity {similarity}, cross-entropy {cross_entropy})")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
        similarity: f64,
        cross_entropy: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
