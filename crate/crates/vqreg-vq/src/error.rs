use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum VqError {
    #[error("channel mismatch: features have {features} channels, codebook has {codebook}")]
    ChannelMismatch { features: usize, codebook: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("invalid codebook: {0}")]
    InvalidCodebook(String),

    #[error("k-means: need at least {k} vectors, got {n}")]
    TooFewVectors { n: usize, k: usize },

    #[error("k-means: empty input")]
    EmptyInput,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed codebook file: {0}")]
    MalformedFile(String),
}
