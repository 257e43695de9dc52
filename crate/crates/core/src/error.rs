use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input violates an operation's precondition (shape, range, finiteness).
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Transmission below the floor makes the scattering model non-invertible.
    #[error("transmission {value} below floor {floor} at pixel {index}")]
    Singularity { value: f64, floor: f64, index: usize },

    /// A contrastive denominator collapsed to (numerically) zero.
    #[error("degenerate contrast at layer {layer}: denominator {denominator:e}")]
    DegenerateContrast { layer: usize, denominator: f64 },

    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, batch sample ids {sample_ids:?}")]
    NonFiniteLoss { epoch: usize, sample_ids: Vec<String> },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
