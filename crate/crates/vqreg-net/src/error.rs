use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("checkpoint i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("checkpoint config does not match: {0}")]
    ConfigMismatch(String),

    #[error(transparent)]
    Core(#[from] vqreg_core::CoreError),

    #[error(transparent)]
    Vq(#[from] vqreg_vq::VqError),
}
