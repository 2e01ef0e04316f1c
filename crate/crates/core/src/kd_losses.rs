//! Distillation losses and the weights that combine them.
//!
//! All squared-error terms are reduced by the mean over elements.
//!
//! LIFT fits `teacher ≈ beta0 + beta1 * student` by least squares and splits
//! the discrepancy into a coarse term on the coefficients,
//! `|beta0| + |beta1 - 1|`, and a fine term on the residual,
//! `mean((teacher - beta0 - beta1 * student)^2)`, combined as
//! `coarse + w * fine`.
//!
//! Gradients with respect to the student output come in two modes, chosen by
//! [`CoeffGrad`]:
//!
//! * [`CoeffGrad::Stop`] (default) treats the fitted coefficients as
//!   constants of the current batch. The coarse term then has no gradient
//!   path at all; it shapes training only through the weight `w` it produces
//!   and, under PLACE, through which elements share a group at each step.
//! * [`CoeffGrad::Full`] differentiates through the closed-form fit as well.
//!   Because the fine term is minimized by the fitted coefficients, its
//!   coefficient path vanishes and only the coarse term gains a gradient.
//!
//! The weight `w` is always an input constant; it is never differentiated.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::LinearMap;
use crate::numerics::Tensor;
use crate::regression::{accumulate_coeff_grad, ols_fit_slices, FitStats, RegressionCoeffs};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoeffGrad {
    #[default]
    Stop,
    Full,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiftOptions {
    /// Squared instead of absolute coefficient penalties in the coarse term.
    pub relaxed_l2: bool,
    pub coeff_grad: CoeffGrad,
}

fn mse_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Output-level distillation: mean squared error between noise predictions.
pub fn outkd_loss(eps_t: &Tensor, eps_s: &Tensor) -> Result<f64> {
    eps_t.ensure_same_shape(eps_s)?;
    Ok(mse_slices(eps_t.data(), eps_s.data()))
}

/// [`outkd_loss`] and its gradient with respect to `eps_s`.
pub fn outkd_loss_grad(eps_t: &Tensor, eps_s: &Tensor) -> Result<(f64, Tensor)> {
    let loss = outkd_loss(eps_t, eps_s)?;
    let n = eps_s.len() as f64;
    let grad = eps_s.zip_map(eps_t, |s, t| 2.0 * (s - t) / n)?;
    Ok((loss, grad))
}

/// Gradients of the feature loss.
#[derive(Debug, Clone)]
pub struct FeatKdGrad {
    pub loss: f64,
    pub d_student: Tensor,
    pub d_weight: Tensor,
    pub d_bias: Tensor,
}

/// Feature-level distillation: `mean((f_t - r(f_s))^2)` where `r` maps each
/// row of student features into the teacher's feature width.
///
/// `f_t` is `[positions, teacher_dim]`, `f_s` is `[positions, student_dim]`.
pub fn featkd_loss(f_t: &Tensor, f_s: &Tensor, regressor: &LinearMap) -> Result<f64> {
    let mapped = regressor.apply(f_s)?;
    outkd_loss(f_t, &mapped)
}

pub fn featkd_loss_grad(f_t: &Tensor, f_s: &Tensor, regressor: &LinearMap) -> Result<FeatKdGrad> {
    let mapped = regressor.apply(f_s)?;
    let (loss, d_mapped) = outkd_loss_grad(f_t, &mapped)?;
    let (d_student, d_weight, d_bias) = regressor.backward(f_s, &d_mapped)?;
    Ok(FeatKdGrad {
        loss,
        d_student,
        d_weight,
        d_bias,
    })
}

/// `|beta0| + |beta1 - 1|`, or the squared form when `relaxed_l2` is set.
pub fn coarse_loss(coeffs: RegressionCoeffs, relaxed_l2: bool) -> f64 {
    let (a, b) = (coeffs.beta0, coeffs.beta1 - 1.0);
    if relaxed_l2 {
        a * a + b * b
    } else {
        a.abs() + b.abs()
    }
}

/// Gradient of [`coarse_loss`] with respect to `(beta0, beta1)`.
pub fn coarse_loss_grad(coeffs: RegressionCoeffs, relaxed_l2: bool) -> (f64, f64) {
    let (a, b) = (coeffs.beta0, coeffs.beta1 - 1.0);
    if relaxed_l2 {
        (2.0 * a, 2.0 * b)
    } else {
        (sign(a), sign(b))
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn fine_slices(t: &[f64], s: &[f64], c: RegressionCoeffs) -> f64 {
    t.iter()
        .zip(s)
        .map(|(&y, &x)| {
            let r = y - c.apply(x);
            r * r
        })
        .sum::<f64>()
        / t.len() as f64
}

/// Residual error after the affine map `coeffs` is applied to the student.
pub fn fine_loss(eps_t: &Tensor, eps_s: &Tensor, coeffs: RegressionCoeffs) -> Result<f64> {
    eps_t.ensure_same_shape(eps_s)?;
    Ok(fine_slices(eps_t.data(), eps_s.data(), coeffs))
}

/// Gradient of [`fine_loss`] with respect to `eps_s`.
///
/// Under [`CoeffGrad::Stop`] the coefficients are held fixed. Under
/// [`CoeffGrad::Full`] they are refitted from `(eps_t, eps_s)`, and the loss
/// being differentiated is `fine_loss(eps_t, eps_s, ols_fit(eps_t, eps_s))`.
pub fn fine_loss_grad(
    eps_t: &Tensor,
    eps_s: &Tensor,
    coeffs: RegressionCoeffs,
    mode: CoeffGrad,
) -> Result<(f64, Tensor)> {
    eps_t.ensure_same_shape(eps_s)?;
    let (t, s) = (eps_t.data(), eps_s.data());
    let mut grad = Tensor::zeros(eps_s.shape())?;
    match mode {
        CoeffGrad::Stop => {
            accumulate_fine_grad(t, s, coeffs, 1.0, grad.data_mut());
            Ok((fine_slices(t, s, coeffs), grad))
        }
        CoeffGrad::Full => {
            let fit = ols_fit_slices(t, s)?;
            accumulate_fine_grad(t, s, fit.coeffs, 1.0, grad.data_mut());
            let (d0, d1) = fine_coeff_grad(t, s, fit.coeffs);
            accumulate_coeff_grad(&fit, t, s, d0, d1, 1.0, grad.data_mut());
            Ok((fine_slices(t, s, fit.coeffs), grad))
        }
    }
}

fn accumulate_fine_grad(t: &[f64], s: &[f64], c: RegressionCoeffs, scale: f64, out: &mut [f64]) {
    let k = -2.0 * c.beta1 * scale / t.len() as f64;
    for ((o, &y), &x) in out.iter_mut().zip(t).zip(s) {
        *o += k * (y - c.apply(x));
    }
}

/// `(d fine / d beta0, d fine / d beta1)`; zero at the least-squares optimum.
fn fine_coeff_grad(t: &[f64], s: &[f64], c: RegressionCoeffs) -> (f64, f64) {
    let n = t.len() as f64;
    let (mut sr, mut srs) = (0.0, 0.0);
    for (&y, &x) in t.iter().zip(s) {
        let r = y - c.apply(x);
        sr += r;
        srs += r * x;
    }
    (-2.0 * sr / n, -2.0 * srs / n)
}

/// `1 - min(1, l_coarse)`: zero while the coarse error is at least one,
/// rising to one as it vanishes.
pub fn adaptive_weight(l_coarse: f64) -> Result<f64> {
    if l_coarse < 0.0 || l_coarse.is_nan() {
        return Err(Error::NegativeInput(l_coarse));
    }
    Ok(1.0 - l_coarse.min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    Adaptive,
    Linear,
    Cosine,
    Fixed(f64),
}

/// Source of the fine-term weight `w`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightScheduler {
    pub kind: SchedulerKind,
    /// Iteration budget for `Linear` and `Cosine`.
    pub total_iters: usize,
}

impl WeightScheduler {
    pub fn adaptive() -> Self {
        Self {
            kind: SchedulerKind::Adaptive,
            total_iters: 1,
        }
    }

    pub fn fixed(w: f64) -> Self {
        Self {
            kind: SchedulerKind::Fixed(w),
            total_iters: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            SchedulerKind::Linear | SchedulerKind::Cosine if self.total_iters == 0 => {
                Err(Error::config("total_iters", "must be positive"))
            }
            SchedulerKind::Fixed(v) if !(0.0..=1.0).contains(&v) => {
                Err(Error::config("fixed_w", format!("{v} is outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// Weight at iteration `iter` (0-based, `0 <= iter <= total_iters`).
///
/// The cosine ramp `(1 - cos(pi i / I)) / 2` is evaluated as
/// `(1 - sin(pi (I - 2i) / 2I)) / 2`, which hits 0, 1/2 and 1 exactly at the
/// start, midpoint and end.
pub fn scheduled_weight(sched: &WeightScheduler, iter: usize, l_coarse: f64) -> Result<f64> {
    let total = sched.total_iters;
    let w = match sched.kind {
        SchedulerKind::Adaptive => adaptive_weight(l_coarse)?,
        SchedulerKind::Fixed(v) => v,
        SchedulerKind::Linear | SchedulerKind::Cosine if iter > total || total == 0 => {
            return Err(Error::IterOutOfRange { iter, total });
        }
        SchedulerKind::Linear => iter as f64 / total as f64,
        SchedulerKind::Cosine => {
            let arg = PI * (total as f64 - 2.0 * iter as f64) / (2.0 * total as f64);
            0.5 * (1.0 - arg.sin())
        }
    };
    Ok(w.clamp(0.0, 1.0))
}

/// Value and parts of one LIFT evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiftEval {
    pub loss: f64,
    pub coarse: f64,
    pub fine: f64,
    pub w: f64,
    pub coeffs: RegressionCoeffs,
}

/// LIFT on raw slices with already fitted coefficients. `fit` is `None` when
/// `coeffs` is a fallback that does not depend on the student.
///
/// When `grad` is given, `scale * dL/ds` is added into it.
pub(crate) fn lift_with_coeffs(
    t: &[f64],
    s: &[f64],
    fit: Option<&FitStats>,
    coeffs: RegressionCoeffs,
    w: f64,
    opts: LiftOptions,
    grad: Option<(&mut [f64], f64)>,
) -> LiftEval {
    let coarse = coarse_loss(coeffs, opts.relaxed_l2);
    let fine = fine_slices(t, s, coeffs);
    if let Some((out, scale)) = grad {
        if w != 0.0 {
            accumulate_fine_grad(t, s, coeffs, w * scale, out);
        }
        if let (CoeffGrad::Full, Some(fit)) = (opts.coeff_grad, fit) {
            let (c0, c1) = coarse_loss_grad(coeffs, opts.relaxed_l2);
            let (f0, f1) = fine_coeff_grad(t, s, coeffs);
            accumulate_coeff_grad(fit, t, s, c0 + w * f0, c1 + w * f1, scale, out);
        }
    }
    LiftEval {
        loss: coarse + w * fine,
        coarse,
        fine,
        w,
        coeffs,
    }
}

/// LIFT loss with weight `w`; fits the coefficients internally.
///
/// Degenerate student variance is reported as
/// [`Error::DegenerateVariance`] so the caller can pick a fallback.
pub fn lift_loss(eps_t: &Tensor, eps_s: &Tensor, w: f64, opts: LiftOptions) -> Result<LiftEval> {
    eps_t.ensure_same_shape(eps_s)?;
    let (t, s) = (eps_t.data(), eps_s.data());
    let fit = ols_fit_slices(t, s)?;
    Ok(lift_with_coeffs(t, s, Some(&fit), fit.coeffs, w, opts, None))
}

/// [`lift_loss`] plus its gradient with respect to `eps_s`.
pub fn lift_loss_grad(
    eps_t: &Tensor,
    eps_s: &Tensor,
    w: f64,
    opts: LiftOptions,
) -> Result<(LiftEval, Tensor)> {
    eps_t.ensure_same_shape(eps_s)?;
    let (t, s) = (eps_t.data(), eps_s.data());
    let fit = ols_fit_slices(t, s)?;
    let mut grad = Tensor::zeros(eps_s.shape())?;
    let eval = lift_with_coeffs(
        t,
        s,
        Some(&fit),
        fit.coeffs,
        w,
        opts,
        Some((grad.data_mut(), 1.0)),
    );
    Ok((eval, grad))
}

/// Multipliers of the training objective terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub diff: f64,
    pub outkd: f64,
    pub lift: f64,
    pub featkd: f64,
}

/// Per-step record of every objective term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub iter: usize,
    pub l_diff: f64,
    pub l_outkd: f64,
    pub l_featkd: f64,
    pub l_coarse: f64,
    pub l_fine: f64,
    pub w: f64,
    pub l_lift: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The weighted sum that `total` must equal.
    pub fn weighted_total(&self, lw: &LossWeights) -> f64 {
        lw.diff * self.l_diff + lw.outkd * self.l_outkd + lw.lift * self.l_lift + lw.featkd * self.l_featkd
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::regression::ols_fit;

    fn pair(seed: u64, n: usize) -> (Tensor, Tensor) {
        let mut rng = Rng::new(seed);
        let s = rng.randn(&[n]).unwrap();
        let t = s.scale(1.3).add(&rng.randn(&[n]).unwrap().scale(0.4)).unwrap().add_scalar(0.2);
        (t, s)
    }

    #[test]
    fn outkd_cases() {
        let (t, s) = pair(1, 32);
        assert_eq!(outkd_loss(&s, &s).unwrap(), 0.0);
        assert!((outkd_loss(&s.add_scalar(1.0), &s).unwrap() - 1.0).abs() < 1e-12);
        let mut acc = 0.0;
        for i in 0..t.len() {
            acc += (t[i] - s[i]) * (t[i] - s[i]);
        }
        assert!((outkd_loss(&t, &s).unwrap() - acc / 32.0).abs() < 1e-12);
        assert!(outkd_loss(&t, &Tensor::zeros(&[31]).unwrap()).is_err());
    }

    #[test]
    fn featkd_cases() {
        let mut rng = Rng::new(2);
        let f = rng.randn(&[5, 3]).unwrap();
        assert_eq!(featkd_loss(&f, &f, &LinearMap::identity(3)).unwrap(), 0.0);

        let f_s = rng.randn(&[5, 2]).unwrap();
        let f_t = rng.randn(&[5, 3]).unwrap();
        let zero = LinearMap::zeros(3, 2);
        let expect = f_t.sum_sq() / f_t.len() as f64;
        assert!((featkd_loss(&f_t, &f_s, &zero).unwrap() - expect).abs() < 1e-12);

        let wrong = LinearMap::zeros(4, 2);
        assert!(featkd_loss(&f_t, &f_s, &wrong).is_err());
    }

    #[test]
    fn coarse_cases() {
        assert_eq!(coarse_loss(RegressionCoeffs::IDENTITY, false), 0.0);
        assert_eq!(coarse_loss(RegressionCoeffs::new(0.5, 1.5), false), 1.0);
        assert_eq!(coarse_loss(RegressionCoeffs::new(0.5, 1.5), true), 0.5);
        assert_eq!(coarse_loss(RegressionCoeffs::new(-2.0, 0.0), false), 3.0);
    }

    #[test]
    fn fine_cases() {
        let (t, s) = pair(3, 40);
        let affine = s.map(|x| 2.0 * x + 3.0);
        let c = ols_fit(&affine, &s).unwrap();
        assert!(fine_loss(&affine, &s, c).unwrap() < 1e-24);
        assert_eq!(
            fine_loss(&t, &s, RegressionCoeffs::IDENTITY).unwrap(),
            outkd_loss(&t, &s).unwrap()
        );
        let c = ols_fit(&t, &s).unwrap();
        assert!(fine_loss(&t, &s, c).unwrap() <= outkd_loss(&t, &s).unwrap());
    }

    #[test]
    fn adaptive_weight_values() {
        assert_eq!(adaptive_weight(0.0).unwrap(), 1.0);
        assert_eq!(adaptive_weight(2.5).unwrap(), 0.0);
        assert_eq!(adaptive_weight(0.3).unwrap(), 0.7);
        assert!(matches!(adaptive_weight(-0.1), Err(Error::NegativeInput(_))));
    }

    #[test]
    fn schedulers() {
        let lin = WeightScheduler {
            kind: SchedulerKind::Linear,
            total_iters: 10,
        };
        assert_eq!(scheduled_weight(&lin, 0, 5.0).unwrap(), 0.0);
        assert_eq!(scheduled_weight(&lin, 10, 5.0).unwrap(), 1.0);
        assert!(matches!(
            scheduled_weight(&lin, 11, 0.0),
            Err(Error::IterOutOfRange { .. })
        ));
        for total in [2, 10, 1000, 12345 * 2] {
            let cos = WeightScheduler {
                kind: SchedulerKind::Cosine,
                total_iters: total,
            };
            assert_eq!(scheduled_weight(&cos, 0, 0.0).unwrap(), 0.0);
            assert_eq!(scheduled_weight(&cos, total / 2, 0.0).unwrap(), 0.5);
            assert_eq!(scheduled_weight(&cos, total, 0.0).unwrap(), 1.0);
        }
        let fixed = WeightScheduler::fixed(1.0);
        assert_eq!(scheduled_weight(&fixed, 999, 7.0).unwrap(), 1.0);
        assert!(WeightScheduler::fixed(1.5).validate().is_err());
        assert_eq!(scheduled_weight(&WeightScheduler::fixed(1.5), 0, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn lift_cases() {
        let (_, s) = pair(4, 64);
        let e = lift_loss(&s, &s, 0.5, LiftOptions::default()).unwrap();
        assert!(e.loss.abs() < 1e-12);
        assert!(e.coeffs.beta0.abs() < 1e-12 && (e.coeffs.beta1 - 1.0).abs() < 1e-12);

        let t = s.map(|x| 2.0 * x + 3.0);
        let e = lift_loss(&t, &s, 1.0, LiftOptions::default()).unwrap();
        assert!((e.loss - 4.0).abs() < 1e-12 && e.fine < 1e-24);

        let flat = Tensor::full(&[8], 1.0).unwrap();
        let head = Tensor::vector(s.data()[..8].to_vec()).unwrap();
        assert!(matches!(
            lift_loss(&head, &flat, 1.0, LiftOptions::default()),
            Err(Error::DegenerateVariance { .. })
        ));
    }

    #[test]
    fn lift_matches_composed_terms() {
        let (t, s) = pair(5, 128);
        let c = ols_fit(&t, &s).unwrap();
        let coarse = coarse_loss(c, false);
        let w = adaptive_weight(coarse).unwrap();
        let e = lift_loss(&t, &s, w, LiftOptions::default()).unwrap();
        let oracle = coarse + w * fine_loss(&t, &s, c).unwrap();
        assert!((e.loss - oracle).abs() < 1e-12);
    }

    #[test]
    fn breakdown_total() {
        let b = LossBreakdown {
            l_diff: 1.0,
            l_outkd: 2.0,
            l_featkd: 3.0,
            l_lift: 4.0,
            ..Default::default()
        };
        let lw = LossWeights {
            diff: 1.0,
            outkd: 0.5,
            lift: 2.0,
            featkd: 1e-6,
        };
        assert!((b.weighted_total(&lw) - (1.0 + 1.0 + 8.0 + 3e-6)).abs() < 1e-12);
    }
}
