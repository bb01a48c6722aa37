//! Dense double-precision tensors with reverse-mode differentiation, and the
//! small set of layers needed for transformer blocks.

pub mod gradcheck;
mod layers;
mod tape;
mod tensor;

pub use layers::{linear, multi_head_attention, LayerNorm, Linear, MultiHeadAttention, ScoreMlp, TransformerBlock};
pub use tape::{Grads, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{ParamId, ParamSet, Tensor};

pub(crate) use tape::{log_sigmoid, sigmoid};

/// Scalar logistic function, exposed for inference-side code.
pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

/// Scalar `ln σ(x)`.
pub fn log_sigmoid_scalar(x: f64) -> f64 {
    log_sigmoid(x)
}
