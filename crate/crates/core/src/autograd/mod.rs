//! Minimal reverse-mode differentiation for the denoiser.

mod gemm;
mod tape;
mod tensor;

pub use tape::{conv1d_out_len, sigmoid, Conv2dGeometry, Gradients, Tape, Var};
pub use tensor::Tensor;
