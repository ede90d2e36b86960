//! Multi-resolution open-vocabulary segmentation on a small differentiable
//! tensor core.

pub mod adapter;
pub mod autograd;
pub mod backbone;
pub mod classifier;
pub mod config;
pub mod decoder;
pub mod error;
pub mod flops;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod text;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use image::InputImage;
pub use model::Model;
pub use params::ParameterStore;
pub use tensor::{Real, Tensor};
