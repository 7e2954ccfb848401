//! A small reverse-mode autodiff engine for 3D volumetric networks.
//!
//! Graphs are built per sample (batching happens outside, by accumulating
//! per-sample parameter gradients in a fixed order), nodes own flat buffers,
//! and every operation has a hand-written adjoint. Everything is generic
//! over `f32`/`f64` so training runs single-precision while gradient checks
//! and oracles run double.

pub mod adam;
pub mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod params;

pub use adam::Adam;
pub use gemm::Gemm;
pub use gradcheck::{grad_check_params, GradCheckReport};
pub use graph::{FrozenVq, Graph, NodeId, Shape, VqOutput};
pub use params::{ParamId, ParamStore};
