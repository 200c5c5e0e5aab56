//! Minimal differentiable-array engine.

mod adam;
mod gemm;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, clip_grad_norm, grad_norm, AdamConfig, AdamState, StepReport};
pub use gradcheck::{check_input_gradient, check_param_gradient, finite_diff_check, REL_FLOOR};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

pub(crate) use tape::softplus;
pub(crate) use tape::time_freqs;

#[cfg(test)]
mod tests;
