//! Sparse voxel radiance fields end to end: a COO field representation,
//! differentiable volume rendering, Plenoxels-style fitting from posed images,
//! a sparse-convolutional network that completes partial fields into whole
//! ones, its training loss, metrics and mesh extraction.

pub mod camera;
pub mod error;
pub mod fit;
pub mod loss;
pub mod par;
pub mod pipeline;
pub mod raster;
pub mod render;
pub mod scene;
pub mod mesh;
pub mod net;
pub mod metrics;
pub mod srf;

pub use error::{Error, Result};
