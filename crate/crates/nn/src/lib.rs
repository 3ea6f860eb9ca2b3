// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal differentiable-computation kernel.
//!
//! Dense tensors, a reverse-mode tape over a fixed op set (matmul, add, mul,
//! layernorm, softmax, causal attention, relu/gelu, embedding, losses, TopK),
//! AdamW, and a finite-difference gradient checker. Training uses `f32`;
//! gradient checks run the identical ops in `f64`.

mod error;
pub mod gradcheck;
mod graph;
mod optim;
mod param;
mod scalar;
mod tensor;

pub use error::NnError;
pub use graph::{softmax_in_place, topk_positive, Graph, Var};
pub use optim::AdamW;
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;
