//! Dense `f64` tensors, a closed-set reverse-mode autodiff graph, Adam, and
//! the checkpoint container.

mod checkpoint;
mod graph;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{Gradients, Graph, Var, STD_EPS};
pub use optim::{Adam, AdamState, PolynomialDecay};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
