//! Minimal reverse-mode automatic differentiation on f64 matrices.

mod graph;
mod params;
mod tensor;

pub use graph::{bce_logit, huber, log_sum_exp, sigmoid, ConvSpec, Graph, Var};
pub use params::{Adam, ParamId, ParamStore};
pub use tensor::Tensor;
