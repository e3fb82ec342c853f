//! Rotation-invariant point cloud pipeline: equivariant reference frames,
//! invariant shape descriptors, aligned-attention feature integration, and a
//! registration-regularized classifier, with a CLI harness for experiments.

pub mod autodiff;
pub mod cloud;
pub mod descriptors;
pub mod frames;
pub mod harness;
pub mod linalg3;
pub mod net;

pub(crate) mod seeds;

pub use linalg3::{Mat3, Vec3};
