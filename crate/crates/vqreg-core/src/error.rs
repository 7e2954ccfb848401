use std::path::PathBuf;

/// Errors produced by the core data types, file formats and operators.
#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("payload size mismatch: header declares {expected} bytes, found {actual}")]
    SizeMismatch { expected: usize, actual: usize },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("invalid landmarks: {0}")]
    InvalidLandmarks(String),

    #[error("point ({0}, {1}, {2}) mm lies outside the volume extent")]
    PointOutsideExtent(f64, f64, f64),

    #[error("synthetic generator: {0}")]
    Synth(String),

    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("config error: {0}")]
    Config(String),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.into(), source }
    }
}
