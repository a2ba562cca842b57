//! Dense tensors, reverse-mode differentiation, finite-difference checking and
//! the DV4D binary tensor container.
//!
//! All values are `f64`. Reductions inside a kernel run in a fixed sequential
//! order, so results are reproducible run to run.

pub mod container;
mod fsum;
mod gradcheck;
pub mod nn;
mod ops;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use fsum::fsum;
pub use gradcheck::{grad_check, grad_check_params, GradCheckOptions, GradCheckReport};
pub use nn::{mlp_forward, Linear, Mlp, Norm};
pub use ops::{sigmoid, softplus};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, Pullback, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch { op: &'static str, expected: Vec<usize>, got: Vec<usize> },
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Softmax along `axis`; see [`Var::softmax`].
pub fn softmax<'t>(logits: Var<'t>, axis: usize) -> Result<Var<'t>, NumericsError> {
    logits.softmax(axis)
}

/// Layer normalization over the last axis; see [`Var::layer_norm`].
pub fn layer_norm<'t>(x: Var<'t>, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>, NumericsError> {
    x.layer_norm(gain, bias, eps)
}

/// Value-preserving detach.
pub fn stop_gradient(x: Var<'_>) -> Var<'_> {
    x.stop_gradient()
}

/// Elementwise Huber penalty summed over all elements:
/// `0.5 r^2` for `|r| <= delta`, `delta (|r| - delta / 2)` otherwise.
pub fn huber<'t>(residual: Var<'t>, delta: f64) -> Result<Var<'t>, NumericsError> {
    if delta <= 0.0 {
        return Err(NumericsError::InvalidArgument(format!("huber delta must be positive, got {delta}")));
    }
    let r = residual.value();
    let total: f64 = r
        .data()
        .iter()
        .map(|&x| if x.abs() <= delta { 0.5 * x * x } else { delta * (x.abs() - 0.5 * delta) })
        .sum();
    let shape = r.shape().to_vec();
    Ok(residual.push(
        &[residual],
        Tensor::scalar(total),
        Box::new(move |g, _| {
            let gv = g.item();
            let d = r.data().iter().map(|&x| gv * x.clamp(-delta, delta)).collect();
            vec![Some(Tensor::from_parts(shape.clone(), d))]
        }),
    ))
}
