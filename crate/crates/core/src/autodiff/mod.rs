//! Tensors, reverse-mode differentiation, gradient checking and AdamW.

mod adamw;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckEntry, GradCheckReport};
pub use graph::{Gradients, Graph, UnaryOp, Var};
pub use params::{ParamEntry, ParamGroup, ParamId, ParamStore};
pub use tensor::{Real, Tensor};
