use thiserror::Error;

/// Errors produced by every prunekit operation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("line {line}: {message}")]
    Ingest { line: usize, message: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty manifest")]
    EmptyManifest,

    #[error("format error: {0}")]
    Format(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("data error at row {row}: {message}")]
    Data { row: usize, message: String },

    #[error("calibration did not converge: closest achieved share {closest_share:.4} at tail exponent {tail_exponent:.4}")]
    Calibration { closest_share: f64, tail_exponent: f64 },

    #[error("reports come from different manifests")]
    MixedManifests,

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::Ingest { .. } => "ingest",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::EmptyManifest => "empty_manifest",
            Error::Format(_) => "format",
            Error::Alignment(_) => "alignment",
            Error::Data { .. } => "data",
            Error::Calibration { .. } => "calibration",
            Error::MixedManifests => "mixed_manifests",
            Error::Config(_) => "config",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
