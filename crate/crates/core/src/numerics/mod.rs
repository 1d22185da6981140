//! Differentiable tensor engine.
//!
//! [`Tensor`] is a plain row-major array; [`Graph`] records ops over tensors and
//! differentiates them in reverse mode. Training runs at `f32`, gradient
//! checking at `f64`; everything is generic over [`Scalar`].

pub mod gradcheck;
pub mod graph;
pub mod kernels;
mod scalar;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{sigmoid_scalar, Gradients, Graph, Unary, Var};
pub use kernels::resize_bilinear;
pub use scalar::{gemm, MatRef, Scalar};
pub use tensor::{strides_of, Tensor};

use crate::error::{Error, Result};

/// Softmax over the last axis (max-subtracted).
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if !x.all_finite() {
        return Err(Error::NonFinite("softmax input contains NaN or infinity".into()));
    }
    Ok(graph::softmax_tensor(x))
}

/// Layer normalization over the last axis.
pub fn layernorm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (xv, gv, bv) = (
        g.constant(x.clone()),
        g.constant(gain.clone()),
        g.constant(bias.clone()),
    );
    let y = g.layernorm(xv, gv, bv, eps)?;
    Ok(g.value(y).clone())
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}
