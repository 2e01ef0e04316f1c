//! Shared inputs for the benchmarks.

use liftkd_core::{Rng, Tensor};

/// Teacher/student output pair of `shape`: the student is an affine
/// distortion of the teacher plus noise.
pub fn output_pair(seed: u64, shape: &[usize]) -> (Tensor, Tensor) {
    let mut rng = Rng::new(seed);
    let t = rng.randn(shape).expect("valid shape");
    let noise = rng.randn(shape).expect("valid shape");
    let s = t.scale(0.8).add_scalar(0.1).add(&noise.scale(0.2)).expect("same shape");
    (t, s)
}
