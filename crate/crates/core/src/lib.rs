//! Desk-scale wildfire spread segmentation toolkit.

pub mod analysis;
mod binio;
pub mod checks;
pub mod config;
pub mod data;
pub mod eval;
pub mod losses;
pub mod models;
pub mod nn;
pub mod prepared;
pub mod raster;
pub mod rng;
pub mod tensor;
pub mod train;

pub use models::{Architecture, ModelConfig, ModelInstance};
pub use nn::Mode;
pub use rng::Pcg32;
pub use tensor::{Graph, Real, Tensor, TensorError, Var};
