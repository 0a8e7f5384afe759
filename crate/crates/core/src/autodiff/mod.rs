//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, RELATIVE_FLOOR};
pub use params::{perturb_trainable, Param, ParamId, ParamStore};
pub use tape::{
    broadcast_shape, invert, logsumexp, sigmoid, softmax_in_place, Gradients, StatUpdate, Tape,
    Var,
};
pub use tensor::Tensor;
