//! Dense tensors, a reverse-mode tape and a finite-difference oracle.

pub mod fd;
pub mod graph;
pub mod kernels;
pub mod tensor;

pub use fd::{finite_difference_check, max_relative_error, numerical_gradient, FdOutcome};
pub use graph::{Gradients, Graph, Var, IGNORE};
pub use tensor::{cosine_similarity, pixelwise_cross_entropy, softmax, Tensor, LOG_EPS};
