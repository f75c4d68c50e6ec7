//! Generalizable sparse-view radiance fields with image-conditional triplane
//! features and a near/far split for unbounded scenes.
//!
//! The crate covers the full pipeline: a convolutional image encoder,
//! back-projection of image features into a world-space volume, softmax
//! aggregation onto three feature planes, near/far rendering MLPs, volume
//! rendering with hierarchical sampling, losses and metrics, a two-phase
//! trainer, and a procedural toy-scene generator with analytic ground truth
//! for end-to-end verification on a single workstation.

// Pull in the BLAS backend so ndarray's GEMM paths link against it.
extern crate blas_src;

pub mod checkpoint;
pub mod decoder;
pub mod error;
pub mod features;
pub mod geometry;
pub mod math;
pub mod metrics;
pub mod model;
pub mod renderer;
pub mod scene;
pub mod triplane;
pub mod volume;

pub use error::{Error, Result};
