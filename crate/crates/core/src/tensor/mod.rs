//! Dense tensors, reverse-mode autodiff, the Adam optimizer and a
//! finite-difference gradient oracle.

mod dense;
pub mod gradcheck;
mod graph;
pub mod optim;

pub use dense::{log_softmax_row, matmul, matmul_at, matmul_bt, softmax_row, Tensor};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{softmax, softmax_cross_entropy, Gradients, Graph, Var};
pub use optim::{clip_global_norm, Adam, AdamConfig, CosineSchedule};
