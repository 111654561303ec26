//! Dynamic-scene reconstruction with deformable, hash-encoded 3D Gaussians.

pub mod config;
pub mod dataio;
pub mod deform;
pub mod diffkernel;
pub mod error;
pub mod gaussians;
pub mod hashenc;
pub mod image;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rasterizer;
pub mod trainer;

pub use error::{Error, Result};
pub use image::Image;
