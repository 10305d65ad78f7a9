//! Dense `f64` tensors with tape-based reverse-mode differentiation, the
//! layer primitives used by the semantic link models, AdamW and the binary
//! checkpoint format.

mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
mod tensor;
pub mod weights;

pub use error::{Result, TensorError};
pub use graph::{BatchMoments, CustomOp, Gradients, Graph, NormStats, Unary, Var};
pub use nn::Mode;
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use tensor::Tensor;
pub use weights::ModelWeights;
