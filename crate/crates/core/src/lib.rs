//! Parameter-efficient "hotfixing" of a small code language model: a
//! reverse-mode autodiff core, a decoder-only transformer, adapters, the
//! hotfix training objectives, and the evaluation harness.

pub mod data;
pub mod error;
pub mod eval;
pub mod fnv;
pub mod gradcheck;
pub mod graph;
pub mod hotfix;
pub mod infer;
pub mod loss;
pub mod model;
pub mod optim;
pub mod peft;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
