//! Vector quantization: codebooks, the nearest-code operator with its
//! loss/gradient contract, and K-means for codebook bootstrap.

pub mod codebook;
pub mod error;
pub mod kmeans;
pub mod quantize;

pub use codebook::{Codebook, CodebookInit, CodebookName};
pub use error::VqError;
pub use kmeans::{kmeans, subsample_rows, KmeansResult};
pub use quantize::{
    nearest_code, quant_loss, quantize, straight_through_backward, FeatureMap, QuantResult,
    COMMITMENT_BETA,
};
