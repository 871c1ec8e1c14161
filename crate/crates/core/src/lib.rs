//! Masked 3D diffusion for video outpainting at desk scale.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training and
//! inference, `f64` for gradient checks); the aliases below name the
//! concrete instantiations used throughout the pipeline.

pub mod autodiff;
pub mod denoiser;
pub mod error;
pub mod executor;
pub mod gradcheck;
pub mod guidance;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod planner;
pub mod sampler;
pub mod synth;
pub mod schedule;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod video;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use optim::{Adam, AdamConfig};
pub use params::ParamStore;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Params32 = ParamStore<f32>;
pub type Params64 = ParamStore<f64>;
