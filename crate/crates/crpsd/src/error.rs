//! Error type shared by every module in the crate.

use std::io;
use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong in the pipeline, from decoding inputs to
/// loading trained models.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("cannot decode {path}: {reason}")]
    CorruptImage { path: PathBuf, reason: String },

    #[error("{context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("image dimensions must be nonzero")]
    EmptyImage,

    #[error("saliency map is constant; no threshold separates it")]
    ConstantMap,

    #[error("requested {requested} superpixels but the image has {pixels} pixels")]
    TooManySuperpixels { requested: usize, pixels: usize },

    #[error("graph needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),

    #[error("window center ({x}, {y}) lies outside a {width}x{height} image")]
    CenterOutOfBounds {
        x: i64,
        y: i64,
        width: usize,
        height: usize,
    },

    #[error("ground truth contains no foreground pixels")]
    EmptyForeground,

    #[error("fixation set is empty")]
    EmptyFixations,

    #[error("no image/mask pairs share a file stem")]
    EmptyIntersection,

    #[error("duplicate stem {stem} in {dir}")]
    DuplicateStem { stem: String, dir: PathBuf },

    #[error("missing prediction files: {}", .0.join(", "))]
    MissingPredictions(Vec<String>),

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error("model format version {found} is not supported (expected {expected})")]
    ModelVersion { found: u32, expected: u32 },

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("{0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Builds a [`Error::Config`] for problems not tied to a line, such as
    /// missing required keys.
    pub(crate) fn config(message: impl Into<String>) -> Self {
        Error::Config {
            line: 0,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidInput(message.into())
    }
}
