//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node on a
//! tape. [`Graph::backward`] walks the tape in reverse once and returns the
//! gradient of a scalar loss with respect to every leaf registered with
//! `requires_grad`. The op set is deliberately small: it covers the
//! convolutional backbones, dense heads and losses used by the trainers, and
//! nothing more. Broadcasting is limited to a right operand whose shape is a
//! trailing suffix of the left operand's shape (bias rows, scalars).

mod graph;
mod kernels;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

/// Above this value of `β·x`, softplus returns `x` to machine precision.
const SOFTPLUS_LINEAR_CUTOFF: f64 = 30.0;

/// `(1/β)·ln(1 + exp(β·x))`, floored at the smallest positive `f64` so the
/// result stays strictly positive where `exp` underflows.
pub fn softplus(x: f64, beta: f64) -> f64 {
    let bx = beta * x;
    let v = if bx > SOFTPLUS_LINEAR_CUTOFF {
        x
    } else {
        bx.exp().ln_1p() / beta
    };
    v.max(f64::from_bits(1))
}

/// Derivative of [`softplus`] with respect to `x`: the logistic `σ(β·x)`.
pub fn softplus_grad(x: f64, beta: f64) -> f64 {
    let bx = beta * x;
    if bx >= 0.0 {
        1.0 / (1.0 + (-bx).exp())
    } else {
        let e = bx.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`]: the raw value whose softplus equals `y > 0`.
pub fn softplus_inverse(y: f64, beta: f64) -> f64 {
    let by = beta * y;
    if by > SOFTPLUS_LINEAR_CUTOFF {
        y
    } else {
        by.exp_m1().ln() / beta
    }
}
