use std::path::PathBuf;

use crate::geom::FitError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("input {height}x{width} is not divisible by {multiple}")]
    IndivisibleDims {
        height: usize,
        width: usize,
        multiple: usize,
    },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("mask {index} has no foreground pixels")]
    EmptyMask { index: usize },
    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: u64, value: f32 },
    #[error("no crop window: mask extent {extent_h}x{extent_w} does not fit in {height}x{width}")]
    NoCropWindow {
        extent_h: usize,
        extent_w: usize,
        height: usize,
        width: usize,
    },
    #[error("augmentation kept losing the mask after {attempts} attempts")]
    AugmentExhausted { attempts: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
