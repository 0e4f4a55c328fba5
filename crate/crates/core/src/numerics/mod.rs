//! Dense tensors, a reproducible random source, the differentiable
//! primitives the network is built from, and a finite-difference checker.

mod gradcheck;
mod ops;
mod rng;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_with, Differentiable, GradCheckOptions, GradCheckReport};
pub use ops::{
    conv2d, conv2d_backward, conv_output_size, l2_normalize, l2_normalize_backward, linear, linear_backward,
    maxpool2d, maxpool2d_backward, relu, relu_backward, Conv2dGrads, LinearGrads, Normalized, PoolOutput,
    DEFAULT_NORM_EPS,
};
pub use rng::Rng;
pub use tensor::Tensor;

/// Numerically stable softmax; subtracts the max logit before exponentiating.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// `log(sum(exp(z)))` computed without overflow.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}
