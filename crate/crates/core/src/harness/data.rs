//! Synthetic training sets.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

use super::config::{DataConfig, DatasetKind};

pub const RING_RADIUS: f64 = 2.0;
pub const RING_STD: f64 = 0.1;
pub const GRID_SIDE: usize = 8;

/// A fixed sample set, one row per point.
#[derive(Debug, Clone)]
pub struct Dataset {
    kind: DatasetKind,
    points: Tensor,
}

impl Dataset {
    pub fn generate(cfg: &DataConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            kind: cfg.kind,
            points: draw(cfg.kind, cfg.samples, rng)?,
        })
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    pub fn dim(&self) -> usize {
        self.points.row_len()
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `size` rows drawn uniformly with replacement.
    pub fn batch(&self, size: usize, rng: &mut Rng) -> Result<Tensor> {
        let d = self.dim();
        let mut out = Vec::with_capacity(size * d);
        for _ in 0..size {
            let i = rng.int_inclusive(0, self.len() - 1);
            out.extend_from_slice(self.points.row(i));
        }
        Tensor::new(vec![size, d], out)
    }
}

/// `n` fresh samples of `kind` as an `[n, dim]` tensor.
pub fn draw(kind: DatasetKind, n: usize, rng: &mut Rng) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::TooFewElements { min: 1, len: 0 });
    }
    let d = kind.data_dim();
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        match kind {
            DatasetKind::Gaussians8 => out.extend(ring_point(rng)),
            DatasetKind::Swissroll => out.extend(swiss_point(rng)),
            DatasetKind::GridPatterns => out.extend(grid_image(rng)),
        }
    }
    Tensor::new(vec![n, d], out)
}

fn ring_point(rng: &mut Rng) -> [f64; 2] {
    let k = rng.int_inclusive(0, 7) as f64;
    let a = 2.0 * PI * k / 8.0;
    [
        RING_RADIUS * a.cos() + RING_STD * rng.normal(),
        RING_RADIUS * a.sin() + RING_STD * rng.normal(),
    ]
}

/// Arc parameter in `[1.5 pi, 4.5 pi]`, scaled so the roll spans about
/// `[-3, 3]`.
fn swiss_point(rng: &mut Rng) -> [f64; 2] {
    let t = 1.5 * PI * (1.0 + 2.0 * rng.uniform());
    [
        t * t.cos() / 5.0 + 0.05 * rng.normal(),
        t * t.sin() / 5.0 + 0.05 * rng.normal(),
    ]
}

/// One to three Gaussian blobs on an 8 x 8 grid, clipped to `[0, 1]` and
/// mapped to `[-1, 1]`.
fn grid_image(rng: &mut Rng) -> Vec<f64> {
    let blobs = rng.int_inclusive(1, 3);
    let mut img = vec![0.0; GRID_SIDE * GRID_SIDE];
    let span = (GRID_SIDE - 1) as f64;
    for _ in 0..blobs {
        let (cy, cx) = (span * rng.uniform(), span * rng.uniform());
        let width = 1.0 + 1.5 * rng.uniform();
        let amp = 0.6 + 0.4 * rng.uniform();
        for (i, v) in img.iter_mut().enumerate() {
            let (y, x) = ((i / GRID_SIDE) as f64, (i % GRID_SIDE) as f64);
            let d2 = (y - cy).powi(2) + (x - cx).powi(2);
            *v += amp * (-d2 / (2.0 * width * width)).exp();
        }
    }
    img.into_iter().map(|v| 2.0 * v.min(1.0) - 1.0).collect()
}
