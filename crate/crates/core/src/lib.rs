//! Numerical verification of the gradient and Hessian identities induced by
//! parameter-space equivariances of a model, together with the training
//! dynamics (gradient flow, gradient descent, stochastic gradient flow) that
//! those identities constrain.
//!
//! Tensors follow a curried storage convention: the first axis of a tensor
//! is the input slot consumed by [`compose`], so `∇f` has shape `(d, c)`.

// `!(x <= tol)` is used on purpose so that NaN fails a check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diff;
pub mod dynamics;
pub mod error;
pub mod identities;
pub mod linalg;
pub mod models;
pub mod tensor;
pub mod transforms;

pub use diff::{DiffConfig, DiffMode, HyperDual, Scalar};
pub use error::{Error, Result};
pub use models::{
    build_model, expected_loss, grad_and_hessian_of_loss, Architecture, Dataset, Loss, LossFamily,
    Model, ModelSpec, Objective, Sample,
};
pub use tensor::{compose, compose_k, invert_square, make_tensor, Shape, Tensor};
