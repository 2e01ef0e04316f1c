//! Tensors, seeded randomness and moment statistics.

mod rng;
mod tensor;

pub use rng::{randn, streams, Rng};
pub use tensor::Tensor;

/// Population mean and variance (divisor `n`) of a slice.
///
/// Two-pass: the variance is accumulated around the already computed mean.
pub fn slice_moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Population mean and variance of every element of `x`.
pub fn moments(x: &Tensor) -> (f64, f64) {
    slice_moments(x.data())
}

/// Population covariance of two equally long slices.
pub fn covariance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / n
}
