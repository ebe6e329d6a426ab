//! Texture-aware diffusion super-resolution at desk scale.
//!
//! * [`imagecore`] float images, PNG I/O, Gaussian windows, resampling
//! * [`rtdm`] relative texture density maps and their binarized latent masks
//! * [`nn`] a small tape-based autodiff with conv/group-norm/Adam
//! * [`diffusion`] noise schedule, control branch, weighted loss, sampler
//! * [`predictor`] gated two-branch texture-map regressor
//! * [`degrade`] synthetic scenes and the degradation pipeline
//! * [`metrics`] PSNR, SSIM and mask agreement
//! * [`tnsr`] the binary float container used for maps and checkpoints
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common instantiations.

pub mod degrade;
pub mod diffusion;
pub mod error;
pub mod imagecore;
pub mod metrics;
pub mod nn;
pub mod predictor;
pub mod rtdm;
pub mod scalar;
pub mod tnsr;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ImageF32 = imagecore::Image<f32>;
pub type ImageF64 = imagecore::Image<f64>;
pub type TextureMapF32 = rtdm::TextureMap<f32>;
pub type TextureMapF64 = rtdm::TextureMap<f64>;
pub type TensorF32 = nn::Tensor<f32>;
pub type TensorF64 = nn::Tensor<f64>;
pub type DenoiserModelF32 = diffusion::DenoiserModel<f32>;
pub type DenoiserModelF64 = diffusion::DenoiserModel<f64>;
pub type PredictorModelF32 = predictor::PredictorModel<f32>;
pub type PredictorModelF64 = predictor::PredictorModel<f64>;
