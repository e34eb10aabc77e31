//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The operator set is deliberately small: size-preserving convolution,
//! pointwise arithmetic and activations, sum/mean reductions, 2x nearest
//! resampling and rectangular crop/pad. That covers the segmentation
//! networks and the recurrent unrolling built on top of them.

mod conv;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{sigmoid, ElementwiseKind, Gradients, Graph, Var};
pub use optim::Sgd;
pub use tensor::Tensor;
