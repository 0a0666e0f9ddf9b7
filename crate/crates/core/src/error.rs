use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or combination of values.
    #[error("configuration error: {0}")]
    Config(String),

    /// An argument outside the domain of an operation (bad index, frame out of range).
    #[error("domain error: {0}")]
    Domain(String),

    /// The weighted quaternion sum of a blend cancelled out.
    #[error("degenerate blend: summed quaternion norm {norm:e} is below 1e-8 (antipodal cancellation)")]
    DegenerateBlend { norm: f64 },

    /// A gradient or parameter became NaN or infinite.
    #[error("non-finite value in parameter group `{group}`")]
    NonFinite { group: String },

    /// The optimizer diverged.
    #[error("optimization diverged: {0}")]
    Diverged(String),

    /// A loss has nothing to measure.
    #[error("unconstrained problem: {0}")]
    Unconstrained(String),

    /// Two bundles could not be stitched together.
    #[error("sequence mismatch: {0}")]
    Mismatch(String),

    /// Malformed bundle, model or report file.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Domain(_) => "domain",
            Error::DegenerateBlend { .. } => "degenerate-blend",
            Error::NonFinite { .. } => "non-finite",
            Error::Diverged(_) => "diverged",
            Error::Unconstrained(_) => "unconstrained",
            Error::Mismatch(_) => "mismatch",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
