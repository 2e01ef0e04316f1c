//! Seeded random number generation.
//!
//! The generator is ChaCha8 (`rand_chacha::ChaCha8Rng`) keyed with
//! `seed_from_u64(seed)`. ChaCha output is specified bit-for-bit, so a seed
//! yields the same stream on every platform. Independent sub-streams are
//! derived with [`Rng::fork`], which keeps the key and selects a different
//! ChaCha stream id; nothing drawn from a parent affects its children.
//!
//! Normal variates use the Ziggurat sampler from `rand_distr::StandardNormal`.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Tensor;
use crate::error::Result;

/// Stream ids used when splitting a root seed.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const TEACHER_INIT: u64 = 2;
    pub const TEACHER_TRAIN: u64 = 3;
    pub const STUDENT_INIT: u64 = 4;
    pub const DISTILL: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const PROJECTIONS: u64 = 7;
    pub const REGRESSOR_INIT: u64 = 8;
    pub const SAMPLER: u64 = 9;
}

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A fresh generator on stream `stream` of this generator's seed.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Rng {
            seed: self.seed,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    /// Tensor of i.i.d. standard normals.
    pub fn randn(&mut self, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_fn(shape, |_| self.normal())
    }
}

/// Free-function form of [`Rng::randn`].
pub fn randn(rng: &mut Rng, shape: &[usize]) -> Result<Tensor> {
    rng.randn(shape)
}
