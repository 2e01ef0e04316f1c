//! Distribution distances between sample sets (rows are points).

use crate::error::{Error, Result};
use crate::numerics::{covariance, Rng, Tensor};

fn check_sets(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.ndim() != 2 || b.ndim() != 2 || a.row_len() != b.row_len() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    for x in [a, b] {
        if x.rows() < 2 {
            return Err(Error::TooFewElements { min: 2, len: x.rows() });
        }
    }
    Ok(())
}

/// Exact W2 between the empirical distributions of two sorted samples.
///
/// Sample `i` of `a` owns the quantile interval `[i m, (i + 1) m)` in units
/// of `1 / (n m)`, and sample `j` of `b` owns `[j n, (j + 1) n)`; the sweep
/// visits every overlap once, so sizes need not match.
pub fn wasserstein2_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len() as u64, b.len() as u64);
    let total = n * m;
    let (mut i, mut j, mut pos) = (0usize, 0usize, 0u64);
    let mut acc = 0.0;
    while pos < total {
        let end_a = (i as u64 + 1) * m;
        let end_b = (j as u64 + 1) * n;
        let next = end_a.min(end_b);
        let d = a[i] - b[j];
        acc += d * d * (next - pos) as f64;
        pos = next;
        if next == end_a {
            i += 1;
        }
        if next == end_b {
            j += 1;
        }
    }
    (acc / total as f64).sqrt()
}

fn project(x: &Tensor, dir: &[f64]) -> Vec<f64> {
    let mut p: Vec<f64> = (0..x.rows())
        .map(|i| x.row(i).iter().zip(dir).map(|(a, b)| a * b).sum())
        .collect();
    p.sort_by(f64::total_cmp);
    p
}

/// Mean over `projections` random unit directions of the 1-D W2 distance
/// between the projected sample sets.
pub fn sliced_wasserstein(a: &Tensor, b: &Tensor, projections: usize, rng: &mut Rng) -> Result<f64> {
    check_sets(a, b)?;
    if projections == 0 {
        return Err(Error::TooFewElements { min: 1, len: 0 });
    }
    let d = a.row_len();
    let mut acc = 0.0;
    for _ in 0..projections {
        let mut dir: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        acc += wasserstein2_sorted(&project(a, &dir), &project(b, &dir));
    }
    Ok(acc / projections as f64)
}

fn column(x: &Tensor, j: usize) -> Vec<f64> {
    (0..x.rows()).map(|i| x.row(i)[j]).collect()
}

/// `(|mean_a - mean_b|, |cov_a - cov_b|_F)` with population covariances.
pub fn moment_gap(a: &Tensor, b: &Tensor) -> Result<(f64, f64)> {
    check_sets(a, b)?;
    let d = a.row_len();
    let cols_a: Vec<Vec<f64>> = (0..d).map(|j| column(a, j)).collect();
    let cols_b: Vec<Vec<f64>> = (0..d).map(|j| column(b, j)).collect();
    let mean = |c: &[f64]| c.iter().sum::<f64>() / c.len() as f64;
    let mean_err = cols_a
        .iter()
        .zip(&cols_b)
        .map(|(x, y)| (mean(x) - mean(y)).powi(2))
        .sum::<f64>()
        .sqrt();
    let mut cov_sq = 0.0;
    for p in 0..d {
        for q in 0..d {
            let diff = covariance(&cols_a[p], &cols_a[q]) - covariance(&cols_b[p], &cols_b[q]);
            cov_sq += diff * diff;
        }
    }
    Ok((mean_err, cov_sq.sqrt()))
}
