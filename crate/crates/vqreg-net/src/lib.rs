//! The registration network (encoder with residual blocks, two quantized
//! bottleneck heads, a quantized hierarchical skip path, and a decoder
//! emitting a dense displacement field), the companion segmentation network
//! used only to bootstrap the collaborative codebook, checkpointing, and the
//! bootstrap pipeline itself.

pub mod bootstrap;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod regnet;
pub mod segnet;
pub mod train;

pub use config::{DictChannels, DictSizes, NetworkConfig, QuantizerKind, QuantizerSet};
pub use error::NetError;
pub use regnet::{RegForward, RegFrozen, RegModel};
pub use segnet::{SegConfig, SegModel};
pub use train::{training_loss, LossNodes, LossValues, TrainSample};
