//! Recurrent saliency transformation for small-target volumetric segmentation.
//!
//! The crate bundles a small reverse-mode autodiff engine, a volume data model
//! with three-axis slicing and fusion, a seeded phantom generator, the
//! segmentation and saliency networks, the jointly trained recurrent
//! coarse-to-fine pipeline, the stage-wise baseline, and a cross-validation
//! harness.

pub mod baseline;
pub mod error;
pub mod harness;
pub mod inference;
pub mod model;
pub mod rng;
pub mod rstn;
pub mod synthgen;
pub mod tensorcore;
pub mod volume;

pub use error::{Error, Result};
