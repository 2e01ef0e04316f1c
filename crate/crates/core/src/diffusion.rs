//! DDPM forward process, ancestral sampling and the regression-corrected
//! diagnostic sampler.
//!
//! Timesteps are 1-based: `t = 1..=T`. The reverse update is
//! `x_{t-1} = (x_t - (1 - a_t) / sqrt(1 - abar_t) * eps) / sqrt(a_t) + sigma_t z`
//! with `sigma_t = sqrt(beta_t)` and `z = 0` at `t = 1`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::models::Mlp;
use crate::numerics::{Rng, Tensor};
use crate::regression::{ols_fit_slices, RegressionCoeffs};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Schedule from per-step betas. Each beta must lie in `[0, 1)` and the
    /// first must be positive so that `abar_t < 1` for every step.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("no steps".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside [0, 1)")));
        }
        if betas[0] <= 0.0 {
            return Err(Error::InvalidSchedule("first beta must be positive".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigmas = betas.iter().map(|b| b.sqrt()).collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// `steps` betas spaced linearly from `beta_start` to `beta_end`.
/// A single step uses `beta_start`.
pub fn linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidSchedule("need at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let i = sched.check(t)?;
    let (a, b) = (sched.alpha_bars[i].sqrt(), (1.0 - sched.alpha_bars[i]).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// [`forward_noise`] with a separate timestep for each row.
pub fn forward_noise_rows(x0: &Tensor, ts: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    x0.ensure_same_shape(eps)?;
    if ts.len() != x0.rows() {
        return Err(Error::ShapeMismatch {
            expected: vec![x0.rows()],
            actual: vec![ts.len()],
        });
    }
    let mut out = x0.clone();
    for (r, &t) in ts.iter().enumerate() {
        let i = sched.check(t)?;
        let (a, b) = (sched.alpha_bars[i].sqrt(), (1.0 - sched.alpha_bars[i]).sqrt());
        for (o, &e) in out.row_mut(r).iter_mut().zip(eps.row(r)) {
            *o = a * *o + b * e;
        }
    }
    Ok(out)
}

/// One reverse step from `x_t` to `x_{t-1}`. `z` must be all zeros at
/// `t = 1`.
pub fn ddpm_step(x_t: &Tensor, t: usize, eps_hat: &Tensor, z: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let i = sched.check(t)?;
    x_t.ensure_same_shape(eps_hat)?;
    x_t.ensure_same_shape(z)?;
    if t == 1 && z.data().iter().any(|&v| v != 0.0) {
        return Err(Error::NonzeroFinalNoise);
    }
    let alpha = sched.alphas[i];
    let coef = (1.0 - alpha) / (1.0 - sched.alpha_bars[i]).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let sigma = sched.sigmas[i];
    let mut out = x_t.clone();
    for ((o, &e), &zz) in out.data_mut().iter_mut().zip(eps_hat.data()).zip(z.data()) {
        *o = inv_sqrt_alpha * (*o - coef * e) + sigma * zz;
    }
    Ok(out)
}

/// Anything that predicts noise for a batch of rows at a shared timestep.
pub trait Denoiser {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

impl Denoiser for Mlp {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        Mlp::predict(self, x_t, t)
    }
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor, usize) -> Result<Tensor>,
{
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self(x_t, t)
    }
}

fn step_noise(rng: &mut Rng, shape: &[usize], t: usize) -> Result<Tensor> {
    if t > 1 {
        rng.randn(shape)
    } else {
        Tensor::zeros(shape)
    }
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `x_0`.
///
/// Draw order: `x_T`, then one noise tensor for each `t = T..2`.
pub fn sample(model: &dyn Denoiser, sched: &NoiseSchedule, rng: &mut Rng, shape: &[usize]) -> Result<Tensor> {
    let mut x = rng.randn(shape)?;
    for t in (1..=sched.steps()).rev() {
        let eps = model.predict(&x, t)?;
        let z = step_noise(rng, shape, t)?;
        x = ddpm_step(&x, t, &eps, &z, sched)?;
    }
    Ok(x)
}

/// Which elements share one least-squares fit in [`corrected_sample`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitScope {
    /// One fit over all elements of a sample (a row).
    #[default]
    PerSample,
    /// Each row split into `channels` contiguous blocks, one fit per block.
    PerChannel { channels: usize },
}

/// Per-step record of the corrected sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub t: usize,
    /// Mean over fitted blocks.
    pub beta0: f64,
    pub beta1: f64,
    /// `mean((eps_T - eps_S)^2)` over the batch.
    pub raw_mse: f64,
    /// `mean((eps_T - corrected)^2)` over the batch.
    pub corrected_mse: f64,
    /// Blocks whose student variance was degenerate (left uncorrected).
    pub degenerate: usize,
}

#[derive(Debug, Clone)]
pub struct CorrectedRun {
    pub x0: Tensor,
    pub steps: Vec<StepDiagnostics>,
}

/// Samples with the student's noise prediction replaced, at every step, by
/// its least-squares affine fit to the teacher's prediction.
///
/// Blocks with degenerate student variance keep the raw student output.
/// Uses the same draw order as [`sample`].
pub fn corrected_sample(
    teacher: &dyn Denoiser,
    student: &dyn Denoiser,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    shape: &[usize],
    scope: FitScope,
) -> Result<CorrectedRun> {
    let mut x = rng.randn(shape)?;
    let row_len = x.row_len();
    let block = match scope {
        FitScope::PerSample => row_len,
        FitScope::PerChannel { channels } => {
            if channels == 0 || row_len % channels != 0 {
                return Err(Error::config(
                    "channels",
                    format!("{channels} does not divide row length {row_len}"),
                ));
            }
            row_len / channels
        }
    };
    let mut steps = Vec::with_capacity(sched.steps());
    for t in (1..=sched.steps()).rev() {
        let eps_t = teacher.predict(&x, t)?;
        let eps_s = student.predict(&x, t)?;
        eps_t.ensure_same_shape(&eps_s)?;
        let mut corrected = eps_s.clone();
        let (mut b0, mut b1, mut fitted, mut degenerate) = (0.0, 0.0, 0usize, 0usize);
        for ((tb, sb), cb) in eps_t
            .data()
            .chunks(block)
            .zip(eps_s.data().chunks(block))
            .zip(corrected.data_mut().chunks_mut(block))
        {
            match ols_fit_slices(tb, sb) {
                Ok(fit) => {
                    let c: RegressionCoeffs = fit.coeffs;
                    for (o, &s) in cb.iter_mut().zip(sb) {
                        *o = c.apply(s);
                    }
                    b0 += c.beta0;
                    b1 += c.beta1;
                    fitted += 1;
                }
                Err(Error::DegenerateVariance { .. }) => degenerate += 1,
                Err(e) => return Err(e),
            }
        }
        let n = eps_t.len() as f64;
        let raw_mse = eps_t.sub(&eps_s)?.sum_sq() / n;
        let corrected_mse = eps_t.sub(&corrected)?.sum_sq() / n;
        let (beta0, beta1) = if fitted > 0 {
            (b0 / fitted as f64, b1 / fitted as f64)
        } else {
            (0.0, 1.0)
        };
        steps.push(StepDiagnostics {
            t,
            beta0,
            beta1,
            raw_mse,
            corrected_mse,
            degenerate,
        });
        let z = step_noise(rng, shape, t)?;
        x = ddpm_step(&x, t, &corrected, &z, sched)?;
    }
    Ok(CorrectedRun { x0: x, steps })
}

/// Writes step diagnostics as CSV with header
/// `t,beta0,beta1,raw_mse,corrected_mse`.
pub fn write_step_csv<W: std::io::Write>(steps: &[StepDiagnostics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "beta0", "beta1", "raw_mse", "corrected_mse"])?;
    for s in steps {
        w.write_record([
            s.t.to_string(),
            s.beta0.to_string(),
            s.beta1.to_string(),
            s.raw_mse.to_string(),
            s.corrected_mse.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_cases() {
        let s = linear_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha(1), 0.5);
        assert_eq!(s.alpha_bar(1), 0.5);

        let s = linear_schedule(1000, 1e-4, 0.02).unwrap();
        let product: f64 = (0..1000).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).product();
        assert!((s.alpha_bar(1000) - product).abs() < 1e-15);
        assert!(s.alpha_bar(1000) < 1e-4);
        for t in 2..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!((s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs() < 1e-12);
        }

        assert!(linear_schedule(10, 1e-4, 1.0).is_err());
        assert!(linear_schedule(10, 0.0, 0.1).is_err());
        assert!(linear_schedule(10, 0.2, 0.1).is_err());
        assert!(linear_schedule(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn forward_noise_cases() {
        let s = linear_schedule(10, 1e-6, 1e-5).unwrap();
        let mut rng = Rng::new(0);
        let x0 = rng.randn(&[3, 2]).unwrap();
        let eps = rng.randn(&[3, 2]).unwrap();
        let xt = forward_noise(&x0, 1, &eps, &s).unwrap();
        let bound = (1.0 - s.alpha_bar(1)).sqrt() * eps.norm() + (1.0 - s.alpha_bar(1).sqrt()) * x0.norm();
        assert!(xt.sub(&x0).unwrap().norm() <= bound + 1e-15);

        let zero = Tensor::zeros(&[3, 2]).unwrap();
        let xt = forward_noise(&zero, 7, &eps, &s).unwrap();
        assert_eq!(xt, eps.scale((1.0 - s.alpha_bar(7)).sqrt()));

        assert!(matches!(forward_noise(&x0, 0, &eps, &s), Err(Error::TimestepOutOfRange { .. })));
        assert!(matches!(forward_noise(&x0, 11, &eps, &s), Err(Error::TimestepOutOfRange { .. })));

        let s = linear_schedule(50, 1e-3, 0.2).unwrap();
        for (i, t) in [3usize, 17, 50].into_iter().enumerate() {
            let xt = forward_noise(&x0, t, &eps, &s).unwrap();
            let ab = s.alpha_bars()[t - 1];
            for j in 0..x0.len() {
                let oracle = ab.sqrt() * x0[j] + (1.0 - ab).sqrt() * eps[j];
                assert!((xt[j] - oracle).abs() < 1e-12, "case {i}");
            }
        }
    }

    #[test]
    fn step_cases() {
        let s = linear_schedule(10, 1e-3, 0.2).unwrap();
        let mut rng = Rng::new(1);
        let x = rng.randn(&[4, 3]).unwrap();
        let zero = Tensor::zeros(&[4, 3]).unwrap();
        let out = ddpm_step(&x, 5, &zero, &zero, &s).unwrap();
        assert_eq!(out, x.scale(1.0 / s.alpha(5).sqrt()));

        let eps = rng.randn(&[4, 3]).unwrap();
        let z = rng.randn(&[4, 3]).unwrap();
        let out = ddpm_step(&x, 5, &eps, &z, &s).unwrap();
        for j in 0..x.len() {
            let oracle = (x[j] - (1.0 - s.alpha(5)) / (1.0 - s.alpha_bar(5)).sqrt() * eps[j]) / s.alpha(5).sqrt()
                + s.beta(5).sqrt() * z[j];
            assert!((out[j] - oracle).abs() < 1e-12);
        }

        assert!(matches!(ddpm_step(&x, 1, &eps, &z, &s), Err(Error::NonzeroFinalNoise)));
        assert!(ddpm_step(&x, 1, &eps, &zero, &s).is_ok());
        assert!(ddpm_step(&x, 11, &eps, &zero, &s).is_err());
    }

    #[test]
    fn unit_alpha_step_is_identity() {
        let s = NoiseSchedule::from_betas(vec![0.5, 0.0]).unwrap();
        let mut rng = Rng::new(2);
        let x = rng.randn(&[2, 2]).unwrap();
        let eps = rng.randn(&[2, 2]).unwrap();
        let zero = Tensor::zeros(&[2, 2]).unwrap();
        assert_eq!(ddpm_step(&x, 2, &eps, &zero, &s).unwrap(), x);
    }

    #[test]
    fn single_step_zero_model() {
        let s = linear_schedule(1, 0.3, 0.3).unwrap();
        let zero_model = |x: &Tensor, _t: usize| Tensor::zeros(x.shape());
        let out = sample(&zero_model, &s, &mut Rng::new(5), &[3, 2]).unwrap();
        let x1 = Rng::new(5).randn(&[3, 2]).unwrap();
        assert_eq!(out, x1.scale(1.0 / 0.7f64.sqrt()));
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = linear_schedule(20, 1e-3, 0.2).unwrap();
        let m = Mlp::new(2, 20, &[8], &mut Rng::new(1)).unwrap();
        let a = sample(&m, &s, &mut Rng::new(3), &[16, 2]).unwrap();
        let b = sample(&m, &s, &mut Rng::new(3), &[16, 2]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn near_zero_noise_steps_barely_move() {
        let s = linear_schedule(10, 1e-12, 1e-12).unwrap();
        let m = Mlp::new(2, 10, &[8], &mut Rng::new(1)).unwrap();
        let mut rng = Rng::new(0);
        let mut x = rng.randn(&[4, 2]).unwrap();
        for t in (2..=10).rev() {
            let eps = m.predict(&x, t).unwrap();
            let z = rng.randn(&[4, 2]).unwrap();
            let next = ddpm_step(&x, t, &eps, &z, &s).unwrap();
            assert!(next.sub(&x).unwrap().norm() < 1e-4);
            x = next;
        }
    }

    #[test]
    fn corrected_identical_models() {
        let s = linear_schedule(10, 1e-3, 0.2).unwrap();
        let m = Mlp::new(4, 10, &[8], &mut Rng::new(1)).unwrap();
        let run = corrected_sample(&m, &m, &s, &mut Rng::new(2), &[3, 4], FitScope::PerSample).unwrap();
        for st in &run.steps {
            assert_eq!(st.raw_mse, 0.0);
            assert!(st.corrected_mse < 1e-28);
            assert!(st.beta0.abs() < 1e-12 && (st.beta1 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn corrected_exact_affine_teacher_tracks_teacher_sampling() {
        let s = linear_schedule(15, 1e-3, 0.2).unwrap();
        let student = Mlp::new(4, 15, &[8], &mut Rng::new(1)).unwrap();
        let teacher = |x: &Tensor, t: usize| Ok(student.predict(x, t)?.map(|v| 2.0 * v + 3.0));
        let run = corrected_sample(&teacher, &student, &s, &mut Rng::new(4), &[1, 4], FitScope::PerSample).unwrap();
        for st in &run.steps {
            assert!(st.corrected_mse < 1e-20, "{st:?}");
            assert!((st.beta0 - 3.0).abs() < 1e-9 && (st.beta1 - 2.0).abs() < 1e-9);
        }
        let direct = sample(&teacher, &s, &mut Rng::new(4), &[1, 4]).unwrap();
        for (a, b) in run.x0.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn per_channel_scope() {
        let s = linear_schedule(5, 1e-3, 0.2).unwrap();
        let a = Mlp::new(8, 5, &[8], &mut Rng::new(1)).unwrap();
        let b = Mlp::new(8, 5, &[4], &mut Rng::new(2)).unwrap();
        let joint = corrected_sample(&a, &b, &s, &mut Rng::new(0), &[2, 8], FitScope::PerSample).unwrap();
        let split = corrected_sample(&a, &b, &s, &mut Rng::new(0), &[2, 8], FitScope::PerChannel { channels: 2 }).unwrap();
        // Finer fits can only reduce the first step's residual.
        assert!(split.steps[0].corrected_mse <= joint.steps[0].corrected_mse + 1e-15);
        assert!(corrected_sample(&a, &b, &s, &mut Rng::new(0), &[2, 8], FitScope::PerChannel { channels: 3 }).is_err());
    }

    #[test]
    fn step_csv_header() {
        let mut buf = Vec::new();
        write_step_csv(
            &[StepDiagnostics {
                t: 2,
                beta0: 0.5,
                beta1: 1.0,
                raw_mse: 0.25,
                corrected_mse: 0.125,
                degenerate: 0,
            }],
            &mut buf,
        )
        .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t,beta0,beta1,raw_mse,corrected_mse\n2,0.5,1,0.25,0.125\n");
    }
}
