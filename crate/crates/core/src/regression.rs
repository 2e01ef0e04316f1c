//! Closed-form scalar least squares `target ≈ beta0 + beta1 * source`.
//!
//! Moments use the population convention (divisor `n`), so
//! `beta1 = Cov(target, source) / Var(source)` and
//! `beta0 = mean(target) - beta1 * mean(source)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Source variance at or below this is treated as degenerate.
pub const VARIANCE_EPS: f64 = 1e-12;

/// Intercept and slope of an affine map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionCoeffs {
    pub beta0: f64,
    pub beta1: f64,
}

impl RegressionCoeffs {
    pub const IDENTITY: RegressionCoeffs = RegressionCoeffs {
        beta0: 0.0,
        beta1: 1.0,
    };

    pub fn new(beta0: f64, beta1: f64) -> Self {
        Self { beta0, beta1 }
    }

    pub fn apply(&self, x: f64) -> f64 {
        self.beta0 + self.beta1 * x
    }

    pub fn is_finite(&self) -> bool {
        self.beta0.is_finite() && self.beta1.is_finite()
    }
}

/// Moments of a fitted pair, kept so derivative code can reuse them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitStats {
    pub coeffs: RegressionCoeffs,
    pub mean_target: f64,
    pub mean_source: f64,
    pub var_source: f64,
}

/// Fits on raw slices. See [`ols_fit`].
pub fn ols_fit_slices(target: &[f64], source: &[f64]) -> Result<FitStats> {
    if target.len() != source.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![target.len()],
            actual: vec![source.len()],
        });
    }
    let len = source.len();
    if len < 2 {
        return Err(Error::TooFewElements { min: 2, len });
    }
    let n = len as f64;
    let mean_target = target.iter().sum::<f64>() / n;
    let mean_source = source.iter().sum::<f64>() / n;
    let (mut cov, mut var) = (0.0, 0.0);
    for (&t, &s) in target.iter().zip(source) {
        let ds = s - mean_source;
        cov += (t - mean_target) * ds;
        var += ds * ds;
    }
    cov /= n;
    var /= n;
    if var.is_nan() || var <= VARIANCE_EPS {
        return Err(Error::DegenerateVariance {
            variance: var,
            fallback: RegressionCoeffs::new(mean_target, 1.0),
        });
    }
    let beta1 = cov / var;
    Ok(FitStats {
        coeffs: RegressionCoeffs::new(mean_target - beta1 * mean_source, beta1),
        mean_target,
        mean_source,
        var_source: var,
    })
}

/// Least-squares coefficients mapping `source` onto `target` over all
/// elements.
///
/// Fails with [`Error::DegenerateVariance`] when `Var(source) <= 1e-12`; the
/// error carries the fallback `(mean(target), 1)`.
pub fn ols_fit(target: &Tensor, source: &Tensor) -> Result<RegressionCoeffs> {
    target.ensure_same_shape(source)?;
    ols_fit_slices(target.data(), source.data()).map(|f| f.coeffs)
}

/// Like [`ols_fit_slices`] but substitutes the fallback on degenerate
/// variance. The flag reports whether the fallback fired.
pub fn ols_fit_or_fallback(target: &[f64], source: &[f64]) -> Result<(RegressionCoeffs, bool)> {
    match ols_fit_slices(target, source) {
        Ok(fit) => Ok((fit.coeffs, false)),
        Err(Error::DegenerateVariance { fallback, .. }) => Ok((fallback, true)),
        Err(e) => Err(e),
    }
}

/// Elementwise `beta0 + beta1 * source`.
pub fn affine_correct(source: &Tensor, coeffs: RegressionCoeffs) -> Tensor {
    source.map(|s| coeffs.apply(s))
}

/// Derivatives of the fitted `(beta0, beta1)` with respect to each source
/// element, contracted with upstream `(d_beta0, d_beta1)` and added into
/// `out` scaled by `scale`.
///
/// With population moments and `d = s_j - mean_s`:
/// `d beta1 / d s_j = ((t_j - mean_t) - 2 beta1 d) / (n Var)` and
/// `d beta0 / d s_j = -mean_s * d beta1 / d s_j - beta1 / n`.
pub fn accumulate_coeff_grad(
    fit: &FitStats,
    target: &[f64],
    source: &[f64],
    d_beta0: f64,
    d_beta1: f64,
    scale: f64,
    out: &mut [f64],
) {
    let n = source.len() as f64;
    let beta1 = fit.coeffs.beta1;
    let denom = n * fit.var_source;
    for ((o, &t), &s) in out.iter_mut().zip(target).zip(source) {
        let db1 = ((t - fit.mean_target) - 2.0 * beta1 * (s - fit.mean_source)) / denom;
        let db0 = -fit.mean_source * db1 - beta1 / n;
        *o += scale * (d_beta0 * db0 + d_beta1 * db1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{covariance, slice_moments, Rng};
    use proptest::prelude::*;

    /// Independent route: solve the 2x2 normal equations
    /// [n, Σs; Σs, Σs²] [b0; b1] = [Σt; Σts] by Cramer's rule.
    pub(crate) fn normal_equation_oracle(t: &[f64], s: &[f64]) -> (f64, f64) {
        let n = s.len() as f64;
        let (mut sx, mut sxx, mut sy, mut sxy) = (0.0, 0.0, 0.0, 0.0);
        for (&y, &x) in t.iter().zip(s) {
            sx += x;
            sxx += x * x;
            sy += y;
            sxy += x * y;
        }
        let det = n * sxx - sx * sx;
        ((sy * sxx - sx * sxy) / det, (n * sxy - sx * sy) / det)
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-12)
    }

    #[test]
    fn identity_and_exact_affine() {
        let s = Rng::new(1).randn(&[50]).unwrap();
        let c = ols_fit(&s, &s).unwrap();
        assert!(c.beta0.abs() < 1e-14 && (c.beta1 - 1.0).abs() < 1e-14);

        let t = s.map(|x| 2.0 * x + 3.0);
        let c = ols_fit(&t, &s).unwrap();
        assert!((c.beta0 - 3.0).abs() < 1e-12 && (c.beta1 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn matches_normal_equations() {
        let mut rng = Rng::new(9);
        let t = rng.randn(&[1000]).unwrap();
        let s = rng.randn(&[1000]).unwrap().add(&t.scale(0.7)).unwrap();
        let c = ols_fit(&t, &s).unwrap();
        let (b0, b1) = normal_equation_oracle(t.data(), s.data());
        assert!(rel(c.beta0, b0) < 1e-9 && rel(c.beta1, b1) < 1e-9);
    }

    #[test]
    fn errors() {
        let a = Tensor::zeros(&[3]).unwrap();
        let b = Tensor::zeros(&[4]).unwrap();
        assert!(matches!(ols_fit(&a, &b), Err(Error::ShapeMismatch { .. })));

        let t = Tensor::vector(vec![1.0, 2.0, 6.0]).unwrap();
        let s = Tensor::full(&[3], 5.0).unwrap();
        match ols_fit(&t, &s) {
            Err(Error::DegenerateVariance { fallback, .. }) => {
                assert_eq!(fallback, RegressionCoeffs::new(3.0, 1.0))
            }
            other => panic!("unexpected {other:?}"),
        }
        let one = Tensor::vector(vec![1.0]).unwrap();
        assert!(matches!(ols_fit(&one, &one), Err(Error::TooFewElements { .. })));
    }

    #[test]
    fn affine_correct_cases() {
        let s = Rng::new(3).randn(&[2, 5]).unwrap();
        assert_eq!(affine_correct(&s, RegressionCoeffs::IDENTITY), s);
        let ones = affine_correct(&s, RegressionCoeffs::new(1.0, 0.0));
        assert!(ones.data().iter().all(|&v| v == 1.0));
        assert_eq!(ones.shape(), s.shape());
    }

    #[test]
    fn coeff_grad_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let t = rng.randn(&[12]).unwrap().into_data();
        let s = rng.randn(&[12]).unwrap().into_data();
        let fit = ols_fit_slices(&t, &s).unwrap();
        for (d0, d1) in [(1.0, 0.0), (0.0, 1.0), (0.3, -1.7)] {
            let mut g = vec![0.0; s.len()];
            accumulate_coeff_grad(&fit, &t, &s, d0, d1, 1.0, &mut g);
            for j in 0..s.len() {
                let h = 1e-6;
                let f = |delta: f64| {
                    let mut sp = s.clone();
                    sp[j] += delta;
                    let c = ols_fit_slices(&t, &sp).unwrap().coeffs;
                    d0 * c.beta0 + d1 * c.beta1
                };
                let fd = (f(h) - f(-h)) / (2.0 * h);
                assert!((fd - g[j]).abs() < 1e-7 * (1.0 + fd.abs()), "{fd} vs {}", g[j]);
            }
        }
    }

    fn sse(t: &[f64], s: &[f64], c: RegressionCoeffs) -> f64 {
        t.iter().zip(s).map(|(&y, &x)| (y - c.apply(x)).powi(2)).sum()
    }

    proptest! {
        #[test]
        fn optimality_and_orthogonality(
            seed in any::<u64>(),
            n in 2usize..200,
            a in -5.0f64..5.0,
            b in -5.0f64..5.0,
        ) {
            let mut rng = Rng::new(seed);
            let t = rng.randn(&[n]).unwrap().into_data();
            let s = rng.randn(&[n]).unwrap().into_data();
            let Ok(fit) = ols_fit_slices(&t, &s) else { return Ok(()); };
            let c = fit.coeffs;
            let best = sse(&t, &s, c);
            let slack = 1e-9 * (1.0 + best);
            prop_assert!(best <= sse(&t, &s, RegressionCoeffs::new(a, b)) + slack);
            prop_assert!(best <= sse(&t, &s, RegressionCoeffs::IDENTITY) + slack);

            let r: Vec<f64> = t.iter().zip(&s).map(|(&y, &x)| y - c.apply(x)).collect();
            prop_assert!(slice_moments(&r).0.abs() < 1e-9);
            prop_assert!(covariance(&r, &s).abs() < 1e-9);
        }

        #[test]
        fn slope_scales_inversely(seed in any::<u64>(), c in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0]) {
            let mut rng = Rng::new(seed);
            let t = rng.randn(&[64]).unwrap().into_data();
            let s = rng.randn(&[64]).unwrap().into_data();
            let cs: Vec<f64> = s.iter().map(|x| c * x).collect();
            let base = ols_fit_slices(&t, &s).unwrap().coeffs;
            let scaled = ols_fit_slices(&t, &cs).unwrap().coeffs;
            prop_assert!(rel(scaled.beta1, base.beta1 / c) < 1e-9);
            prop_assert!((scaled.beta0 - base.beta0).abs() < 1e-9 * (1.0 + base.beta0.abs()));
        }
    }
}
