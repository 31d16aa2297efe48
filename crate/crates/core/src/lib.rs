//! Joint refinement of an articulated body pose and a surface-bound
//! Gaussian splat avatar by differentiable rendering.

pub mod body;
pub mod error;
pub mod gaussians;
pub mod geometry;
mod hash;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod raster;
pub mod renderer;
pub mod scene_io;

pub use error::{Error, Result};
