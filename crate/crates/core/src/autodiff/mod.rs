//! Dense-tensor reverse-mode automatic differentiation over a closed
//! operator catalog, plus the Adam optimizer and step learning-rate schedule.

mod check;
mod graph;
mod optim;
mod tensor;

pub use check::{grad_check, GradCheckOptions};
pub use graph::{Gradients, Graph, Var};
pub use optim::{step_lr, AdamConfig, Bindings, Param, ParamStore};
pub use tensor::Tensor;
