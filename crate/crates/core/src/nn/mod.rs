//! Small dense autodiff: NCHW tensors, a recording tape, Adam and
//! finite-difference verification.

mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, DEFAULT_EPS};
pub use graph::{Activation, Grads, Graph, Var, GROUP_NORM_EPS};
pub use layers::{timestep_embedding, Conv, Norm, ResBlock};
pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use params::{Init, ParameterSet};
pub use tensor::{Shape, Tensor};
