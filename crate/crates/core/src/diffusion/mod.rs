//! Epsilon-prediction diffusion on pixel latents with a texture-aware loss,
//! a lightweight control branch, and the alternating sampler.

mod control;
mod latent;
mod loss;
mod model;
mod sampler;
mod schedule;
pub(crate) mod train;

pub use control::{cross_normalize, cross_normalize_graph, sft_inject, ControlInputs, MiniControlBranch, SftLayer, CROSS_NORM_EPS};
pub use latent::{decode_latent, encode_latent, lr_condition, LATENT_FACTOR};
pub use loss::{loss_weights, mask_tensor, mse, split_mse, tadl_loss, tadl_loss_graph};
pub use model::{
    denoise_forward, ConditionSet, DenoiserModel, ForwardVars, FreezePreset, ModelConfig, PAPER_FROZEN_PREFIXES,
};
pub use sampler::{sample, AnalyticGaussian, EpsPredictor, Parity, StepEvent, StepKind, TaSamplerConfig};
pub use schedule::{
    analytic_gaussian_eps, ddpm_step, forward_mix, gaussian_posterior_mean, make_schedule, q_sample, NoiseSchedule,
    ScheduleConfig,
};
pub use train::{read_loss_log, smoothed, train, write_loss_log, LossKind, LossRecord, TrainConfig, TrainExample};
