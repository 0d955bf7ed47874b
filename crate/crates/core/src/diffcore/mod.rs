//! Dense `f64` tensors with a small reverse-mode autodiff graph.

mod checkpoint;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use checkpoint::{load, read_checkpoint, save, write_checkpoint, MAGIC, VERSION};
pub use graph::{Feed, Graph, NodeId, Unary};
pub use params::ParamSet;
pub use tensor::{log_sum_exp, softmax, Tensor};
