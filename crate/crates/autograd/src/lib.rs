//! A small reverse-mode automatic differentiation engine over dense CPU
//! tensors.
//!
//! Tensors are immutable and cheap to clone. Operations record a graph node
//! whenever one of their inputs requires a gradient; [`Tensor::backward`]
//! walks that graph and returns the gradients of every [`Var`] leaf.
//! Convolutions and matrix products go through `matrixmultiply`, everything
//! runs on the calling thread, and results are bitwise reproducible.
//!
//! New differentiable operations can be added from outside the crate by
//! implementing [`BackwardOp`] and building the result with
//! [`Tensor::from_op`].

mod element;
mod ops;
mod shape;
mod tensor;
mod var;

pub mod gradcheck;

pub use element::Element;
pub use shape::broadcast_shape;
pub use tensor::{grad_enabled, no_grad, BackwardOp, Gradients, Tensor, TensorId};
pub use var::Var;
