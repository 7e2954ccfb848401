//! Core volumetric data model for weakly-supervised deformable registration.
//!
//! This crate holds the data types shared by the whole workspace (volumes,
//! masks, landmark sets, displacement fields), their on-disk formats, a
//! deterministic synthetic data generator, the spatial transform operators
//! (trilinear resampling, point warping, Jacobian analysis), the training
//! loss definitions and the evaluation metric suite.

pub mod error;
pub mod io;
pub mod keyval;
pub mod losses;
pub mod metrics;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod synth;
pub mod transform;
pub mod volume;

pub use error::CoreError;
pub use scalar::Scalar;
pub use volume::{
    DisplacementField, Dtype, LandmarkSet, MaskKind, MaskVolume, RegistrationSample, Volume3D,
};
