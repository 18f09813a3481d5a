//! Continuous latent diffusion over jointly learned embeddings of discrete
//! token sequences, with consistency matching against an EMA teacher.
//!
//! The numeric core is generic over the scalar type (`f32` or `f64`); the
//! aliases below fix it to `f32` for ordinary use.

pub mod ablate;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod codebook;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Denoiser32 = denoiser::Denoiser<f32>;
pub type Codebook32 = codebook::Codebook<f32>;
pub type TrainState32 = trainer::TrainState<f32>;
