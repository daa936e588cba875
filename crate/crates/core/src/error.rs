use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Shape and argument failures raised by tensor operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("{op}: expected {expected}-d input, got shape {got:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("{op}: mismatch on {axis} axis ({left} vs {right})")]
    Axis {
        op: &'static str,
        axis: &'static str,
        left: usize,
        right: usize,
    },
    #[error("{op}: shapes {left:?} and {right:?} are incompatible")]
    Incompatible {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Argument { op: &'static str, msg: String },
    #[error("buffer of length {len} does not fill shape {shape:?}")]
    Size { shape: Vec<usize>, len: usize },
}

/// Failures while decoding one of the binary file formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("channel count {found} does not match expected {expected}")]
    ChannelCount { expected: usize, found: usize },
    #[error("invalid class value {value} at pixel {index}")]
    InvalidClass { value: u8, index: usize },
    #[error("probabilities at pixel {index} sum to {sum}, not 1")]
    NotNormalized { index: usize, sum: f32 },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(usize),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("spatial size {height}x{width} is not a multiple of {multiple}")]
    Indivisible {
        height: usize,
        width: usize,
        multiple: usize,
    },
    #[error("missing parameter {0}")]
    MissingParam(String),
}

impl Error {
    pub fn at(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by malformed or mismatched input data.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::File { source, .. } => source.is_data_error(),
            Error::Format(_)
            | Error::Io(_)
            | Error::Indivisible { .. }
            | Error::MissingParam(_) => true,
            Error::Shape(_) => true,
            _ => false,
        }
    }

    /// True for numeric breakdowns (NaN/Inf) during training.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::File { source, .. } => source.is_numeric(),
            Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. } => true,
            _ => false,
        }
    }
}
