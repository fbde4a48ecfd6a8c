//! Dense tensors, a reverse-mode tape and first-order optimizers.

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{AttnShape, Graph, Var, NORM_FLOOR};
pub use optim::{cosine_lr, Optimizer, Scheme};
pub use params::{split_grads, GradMap, ParameterSet};
pub use tensor::Tensor;

pub(crate) use graph::top_k_indices;
pub(crate) use tensor::dot;
