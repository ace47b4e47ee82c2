//! Error type of the runtime crate.

use std::path::PathBuf;

use ugc_core::CoreError;

/// Errors raised while training, searching, evaluating or handling files.
#[derive(Debug, thiserror::Error)]
pub enum UgcError {
    /// Error from the search-space, accounting or search primitives.
    #[error(transparent)]
    Core(#[from] CoreError),
    /// Two tensors that must agree in shape do not.
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    /// An SSIM window does not fit inside the image.
    #[error("SSIM window {window} exceeds image size {height}x{width}")]
    WindowTooLarge {
        /// Window side.
        window: usize,
        /// Image height.
        height: usize,
        /// Image width.
        width: usize,
    },
    /// Input collection was empty where data is required.
    #[error("empty input: {0}")]
    Empty(String),
    /// Input too small or ill-conditioned for the requested statistic.
    #[error("degenerate input: {0}")]
    Degenerate(String),
    /// A required file or directory is missing.
    #[error("missing required file {}", .0.display())]
    Missing(PathBuf),
    /// Filesystem failure.
    #[error("{}: {source}", path.display())]
    Io {
        /// Path involved.
        path: PathBuf,
        /// Underlying error.
        source: std::io::Error,
    },
    /// A file exists but cannot be decoded.
    #[error("bad format in {}: {reason}", path.display())]
    Format {
        /// Path involved.
        path: PathBuf,
        /// What was wrong.
        reason: String,
    },
    /// Invalid configuration value.
    #[error("config: {0}")]
    Config(String),
}

impl UgcError {
    /// Wraps an IO error with the path it concerns.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Format error for `path`.
    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Format { path: path.into(), reason: reason.into() }
    }
}

/// Result alias for this crate.
pub type Result<T> = std::result::Result<T, UgcError>;
