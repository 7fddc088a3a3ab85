//! Minimal dense-tensor core: rank-1/2 f32 tensors, a Wengert tape for
//! reverse-mode differentiation over a fixed primitive set, and Adam.
//!
//! No hidden randomness: anything stochastic takes a caller-owned RNG.

mod adam;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use tape::{Gradients, Tape, TensorId};
pub use tensor::{
    add, concat, layer_norm_lite, matmul, mean, mish, mul, scale, sinusoid, slice,
    sum_of_squares, Tensor,
};
