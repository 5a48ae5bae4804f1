//! Flash/no-flash low-light denoising with a predicted two-scale kernel basis.

pub mod container;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod image;
pub mod kernel;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod render;
pub mod simulation;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use image::LinearImage;
pub use tensor::{Float, Tensor};
