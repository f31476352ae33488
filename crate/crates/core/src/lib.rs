//! Graph unlearning through transferable condensed graphs.
//!
//! A graph is condensed once into a small synthetic graph. When deletions
//! arrive, the condensed graph is fine-tuned toward the remaining graph —
//! without ever seeing the deleted data — and a fresh GNN is retrained on it.

pub mod autodiff;
pub mod checkpoint;
pub mod condense;
pub mod error;
pub mod eval;
pub mod gnn;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod sparse;
pub mod tensor;
pub mod transfer;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use gradcheck::finite_diff_check;
pub use optim::{Optimizer, OptimizerKind};
pub use scalar::Scalar;
pub use sparse::CsrMatrix;
pub use tensor::Tensor;
pub use graph::AttributedGraph;

pub type Graph = AttributedGraph<f64>;
pub type Graph32 = AttributedGraph<f32>;
