//! Minimal reverse-mode differentiation over dense row-major tensors.
//!
//! A [`Tape`] records operations in creation order, so node indices are already a
//! topological order and the backward pass is a single reverse sweep. Trainable
//! tensors live in a [`ParameterSet`]; the tape references them by [`ParamId`]
//! and writes gradients back into the set's gradient slots.
//!
//! All arithmetic is `f64`.

mod gradcheck;
mod kernels;
mod mlp;
mod params;
mod tape;
mod tensor;

pub use gradcheck::finite_difference_check;
pub use kernels::{
    argmax, cross_entropy, log_softmax_with_temperature, softmax_with_temperature,
    sum_over_instances, validate_temperature,
};
pub use mlp::{forward_mlp, mlp_on_tape, Activation, Architecture};
pub use params::{ParamId, ParameterSet};
pub use tape::{GradMode, Tape, Var};
pub use tensor::Tensor;
