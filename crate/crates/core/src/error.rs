use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The rescale factor is too small for the shift budget `32 + k - 8`.
    #[error("rescaler underflow{}: M = {value:e} needs shift {shift} > budget {budget}", location.as_ref().map(|l| format!(" at {l}")).unwrap_or_default())]
    RescalerUnderflow {
        value: f64,
        shift: u32,
        budget: u32,
        /// `layer L channel C` once the failing rescaler has been located in a model.
        location: Option<String>,
    },

    #[error("integer overflow: {0}")]
    Overflow(String),

    /// An emulated intermediate left the range where binary64 is exact.
    #[error("binary64 envelope exceeded: {0}")]
    OverflowEnvelope(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    /// Malformed model container or dataset file.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
