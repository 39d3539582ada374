//! Dense tensors, seeded randomness and reverse-mode differentiation.
//!
//! Everything above this module is expressed as compositions of the
//! primitives in [`autograd`]; gradients are checked against central
//! differences by [`gradcheck`].

pub mod autograd;
mod gemm;
pub mod gradcheck;
pub mod params;
pub mod rng;
pub mod tensor;

pub use autograd::{Bindings, Gradients, Graph, RopeTable, Var};
pub use gradcheck::{evaluate, grad, grad_check, relative_error, GradientReport};
pub use params::ParamStore;
pub use rng::{seeded_normal, Rng};
pub use tensor::Tensor;
