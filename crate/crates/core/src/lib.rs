//! Memory-efficient 4D Gaussian splatting on the CPU.
//!
//! The crate covers the full pipeline for dynamic scenes: 4D Gaussian
//! geometry and temporal slicing ([`gauss`]), the DC-AC color predictor
//! ([`color`]), the temporal-viewpoint deformation network ([`deform`]),
//! a differentiable tile rasterizer ([`render`]), losses and training
//! ([`loss`], [`train`]), and the FP16 + delta + DEFLATE archive
//! ([`codec`]). [`dataset`], [`synth`] and [`metrics`] provide the I/O and
//! evaluation around it.

pub mod camera;
pub mod codec;
pub mod color;
pub mod dataset;
pub mod deform;
pub mod error;
pub mod gauss;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod mlp;
pub mod model;
pub mod optim;
pub mod render;
pub mod synth;
pub mod train;

pub use nalgebra;

pub use camera::Camera;
pub use error::{Error, Result};
pub use gauss::{Gaussian4D, GaussianCloud, Quaternion, Sliced3D};
pub use image::Image;
pub use model::Model;
pub use render::{Predictors, RenderConfig};
