//! Teacher pretraining and teacher-to-student distillation.
//!
//! Randomness is split by fixed streams. The training set, the evaluation
//! reference set and the evaluation projections come from the config's root
//! `seed`, so every run of an experiment sees the same data. Model
//! initialization, batches, timesteps, noise and sampling come from the run
//! generator passed in.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_noise_rows, sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::kd_losses::{
    coarse_loss, featkd_loss_grad, lift_with_coeffs, outkd_loss_grad, scheduled_weight, LiftOptions,
    LossBreakdown, LossWeights, WeightScheduler,
};
use crate::models::{Adam, LinearMap, Mlp};
use crate::numerics::{streams, Rng, Tensor};
use crate::place::{partition_slices, place_slices, PlaceOptions};
use crate::regression::ols_fit_slices;

use super::config::{DatasetKind, DiffTarget, DistillConfig, HarnessConfig};
use super::data::{draw, Dataset};
use super::metrics::{moment_gap, sliced_wasserstein};

/// The training set shared by every run built from `cfg`.
pub fn shared_dataset(cfg: &HarnessConfig) -> Result<Dataset> {
    Dataset::generate(&cfg.data, &mut Rng::new(cfg.seed).fork(streams::DATA))
}

/// How a batch of noise predictions is laid out for group-wise LIFT.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaceLayout {
    /// Each data coordinate is a channel and the batch is its spatial axis:
    /// a `[B, D]` batch becomes one `D x 1 x B` map.
    BatchAxis,
    /// Each row is its own `channels x (row_len / channels)` map; the loss is
    /// the mean over rows.
    PerSample { channels: usize },
}

impl PlaceLayout {
    pub fn for_dataset(kind: DatasetKind) -> Self {
        match kind {
            DatasetKind::GridPatterns => PlaceLayout::PerSample { channels: 1 },
            DatasetKind::Gaussians8 | DatasetKind::Swissroll => PlaceLayout::BatchAxis,
        }
    }
}

/// Hidden features and the regressor for the FeatKD term.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePair<'a> {
    pub teacher: &'a Tensor,
    pub student: &'a Tensor,
    pub regressor: &'a LinearMap,
}

/// Everything one objective evaluation needs; outputs are `[B, D]`.
#[derive(Debug, Clone, Copy)]
pub struct StepInputs<'a> {
    pub iter: usize,
    /// Noise used to form `x_t`.
    pub noise: &'a Tensor,
    pub teacher_out: &'a Tensor,
    pub student_out: &'a Tensor,
    pub features: Option<FeaturePair<'a>>,
}

/// Value, parts and gradients of the training objective at one step.
#[derive(Debug, Clone)]
pub struct StepLoss {
    pub breakdown: LossBreakdown,
    /// Gradient of the weighted total with respect to the student output.
    pub d_output: Tensor,
    /// Gradient of the unweighted diffusion term alone.
    pub d_diff: Tensor,
    /// Weighted FeatKD gradient on the tapped student features.
    pub d_features: Option<Tensor>,
    /// Weighted FeatKD gradient on the regressor `(weight, bias)`.
    pub d_regressor: Option<(Tensor, Tensor)>,
    /// Fits that fell back because the student variance was degenerate.
    pub degenerate: usize,
}

/// The configured training objective
/// `l_diff * L_diff + l_outkd * L_outkd + l_lift * L_lift + l_featkd * L_featkd`.
#[derive(Debug, Clone)]
pub struct LossStack {
    weights: LossWeights,
    diff_target: DiffTarget,
    place: bool,
    group_size: usize,
    sched: WeightScheduler,
    lift_opts: LiftOptions,
    place_opts: PlaceOptions,
    layout: PlaceLayout,
    ema_decay: f64,
    ema: Option<f64>,
}

struct LiftParts {
    coarse: f64,
    fine: f64,
    w: f64,
    loss: f64,
    degenerate: usize,
}

impl LossStack {
    pub fn new(cfg: &DistillConfig, layout: PlaceLayout) -> Self {
        Self {
            weights: cfg.weights(),
            diff_target: cfg.diff_target,
            place: cfg.place,
            group_size: cfg.group_size,
            sched: cfg.scheduler(),
            lift_opts: cfg.lift_options(),
            place_opts: cfg.place_options(),
            layout,
            ema_decay: cfg.coarse_ema,
            ema: None,
        }
    }

    pub fn weights(&self) -> LossWeights {
        self.weights
    }

    pub fn evaluate(&mut self, x: &StepInputs) -> Result<StepLoss> {
        let lw = self.weights;
        let target = match self.diff_target {
            DiffTarget::Teacher => x.teacher_out,
            DiffTarget::Noise => x.noise,
        };
        let (l_diff, d_diff) = outkd_loss_grad(target, x.student_out)?;
        let (l_outkd, d_outkd) = outkd_loss_grad(x.teacher_out, x.student_out)?;

        let mut d_output = d_diff.scale(lw.diff);
        if lw.outkd != 0.0 {
            d_output = d_output.add(&d_outkd.scale(lw.outkd))?;
        }

        let mut b = LossBreakdown {
            iter: x.iter,
            l_diff,
            l_outkd,
            ..LossBreakdown::default()
        };
        let mut degenerate = 0;
        if lw.lift != 0.0 {
            let parts = if self.place {
                self.place_term(x, lw.lift, &mut d_output)?
            } else {
                self.global_term(x, lw.lift, &mut d_output)?
            };
            b.l_coarse = parts.coarse;
            b.l_fine = parts.fine;
            b.w = parts.w;
            b.l_lift = parts.loss;
            degenerate = parts.degenerate;
        }

        let (mut d_features, mut d_regressor) = (None, None);
        if lw.featkd != 0.0 {
            let f = x
                .features
                .ok_or_else(|| Error::config("distill.featkd", "no features supplied"))?;
            let g = featkd_loss_grad(f.teacher, f.student, f.regressor)?;
            b.l_featkd = g.loss;
            d_features = Some(g.d_student.scale(lw.featkd));
            d_regressor = Some((g.d_weight.scale(lw.featkd), g.d_bias.scale(lw.featkd)));
        }

        b.total = b.weighted_total(&lw);
        Ok(StepLoss {
            breakdown: b,
            d_output,
            d_diff,
            d_features,
            d_regressor,
            degenerate,
        })
    }

    /// One fit over the whole batch.
    fn global_term(&mut self, x: &StepInputs, scale: f64, grad: &mut Tensor) -> Result<LiftParts> {
        let (t, s) = (x.teacher_out.data(), x.student_out.data());
        let (fit, coeffs) = match ols_fit_slices(t, s) {
            Ok(fit) => (Some(fit), fit.coeffs),
            Err(Error::DegenerateVariance { fallback, .. }) => (None, fallback),
            Err(e) => return Err(e),
        };
        let coarse = coarse_loss(coeffs, self.lift_opts.relaxed_l2);
        let signal = if self.ema_decay > 0.0 {
            let a = self.ema_decay;
            let v = self.ema.map_or(coarse, |prev| a * prev + (1.0 - a) * coarse);
            self.ema = Some(v);
            v
        } else {
            coarse
        };
        let w = scheduled_weight(&self.sched, x.iter, signal)?;
        let e = lift_with_coeffs(t, s, fit.as_ref(), coeffs, w, self.lift_opts, Some((grad.data_mut(), scale)));
        Ok(LiftParts {
            coarse: e.coarse,
            fine: e.fine,
            w: e.w,
            loss: e.loss,
            degenerate: usize::from(fit.is_none()),
        })
    }

    /// Group-wise LIFT with the partition rebuilt from the current errors.
    fn place_term(&self, x: &StepInputs, scale: f64, grad: &mut Tensor) -> Result<LiftParts> {
        let (teacher, student) = (x.teacher_out, x.student_out);
        match self.layout {
            PlaceLayout::BatchAxis => {
                let (t, s) = (teacher.transpose()?, student.transpose()?);
                let channels = t.rows();
                let part = partition_slices(t.data(), s.data(), channels, self.group_size)?;
                let mut g = Tensor::zeros(t.shape())?;
                let e = place_slices(
                    t.data(),
                    s.data(),
                    &part,
                    &self.sched,
                    x.iter,
                    self.place_opts,
                    Some((g.data_mut(), scale)),
                )?;
                *grad = grad.add(&g.transpose()?)?;
                Ok(LiftParts {
                    coarse: e.mean_coarse(),
                    fine: e.mean_fine(),
                    w: e.mean_w(),
                    loss: e.loss,
                    degenerate: e.degenerate_count(),
                })
            }
            PlaceLayout::PerSample { channels } => {
                let rows = teacher.rows();
                let inv = 1.0 / rows as f64;
                let mut acc = LiftParts {
                    coarse: 0.0,
                    fine: 0.0,
                    w: 0.0,
                    loss: 0.0,
                    degenerate: 0,
                };
                for r in 0..rows {
                    let (t, s) = (teacher.row(r), student.row(r));
                    let part = partition_slices(t, s, channels, self.group_size)?;
                    let e = place_slices(
                        t,
                        s,
                        &part,
                        &self.sched,
                        x.iter,
                        self.place_opts,
                        Some((grad.row_mut(r), scale * inv)),
                    )?;
                    acc.coarse += e.mean_coarse() * inv;
                    acc.fine += e.mean_fine() * inv;
                    acc.w += e.mean_w() * inv;
                    acc.loss += e.loss * inv;
                    acc.degenerate += e.degenerate_count();
                }
                Ok(acc)
            }
        }
    }
}

/// Log and final metrics of one distillation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub teacher_params: usize,
    pub student_params: usize,
    /// One entry per optimization step.
    pub log: Vec<LossBreakdown>,
    /// Parameter-gradient norm of the unweighted diffusion term, per step.
    pub grad_norms: Vec<f64>,
    /// Degenerate-variance fallbacks per step.
    pub degenerate: Vec<usize>,
    pub final_sw: f64,
    pub mean_err: f64,
    pub cov_err: f64,
    /// Not part of the CSV log, which must be reproducible.
    pub wall_clock_secs: f64,
}

impl RunReport {
    fn new(seed: u64, teacher_params: usize, student_params: usize, iterations: usize) -> Self {
        Self {
            seed,
            teacher_params,
            student_params,
            log: Vec::with_capacity(iterations),
            grad_norms: Vec::with_capacity(iterations),
            degenerate: Vec::with_capacity(iterations),
            final_sw: f64::NAN,
            mean_err: f64::NAN,
            cov_err: f64::NAN,
            wall_clock_secs: 0.0,
        }
    }

    pub const CSV_HEADER: [&'static str; 10] = [
        "step", "l_diff", "l_outkd", "l_coarse", "l_fine", "w", "l_lift", "l_featkd", "total", "grad_norm",
    ];

    /// Per-step log as CSV, one row per step.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::CSV_HEADER)?;
        for (b, g) in self.log.iter().zip(&self.grad_norms) {
            w.write_record([
                b.iter.to_string(),
                b.l_diff.to_string(),
                b.l_outkd.to_string(),
                b.l_coarse.to_string(),
                b.l_fine.to_string(),
                b.w.to_string(),
                b.l_lift.to_string(),
                b.l_featkd.to_string(),
                b.total.to_string(),
                g.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_compatible(model: &Mlp, cfg: &HarnessConfig, field: &str) -> Result<()> {
    let dim = cfg.data.kind.data_dim();
    if model.data_dim() != dim || model.timesteps() != cfg.schedule.timesteps {
        return Err(Error::config(
            field,
            format!(
                "model has data_dim {} and {} timesteps; config needs {dim} and {}",
                model.data_dim(),
                model.timesteps(),
                cfg.schedule.timesteps
            ),
        ));
    }
    Ok(())
}

struct NoisyBatch {
    ts: Vec<usize>,
    eps: Tensor,
    x_t: Tensor,
}

fn noisy_batch(data: &Dataset, size: usize, sched: &NoiseSchedule, rng: &mut Rng) -> Result<NoisyBatch> {
    let x0 = data.batch(size, rng)?;
    let ts: Vec<usize> = (0..size).map(|_| rng.int_inclusive(1, sched.steps())).collect();
    let eps = rng.randn(x0.shape())?;
    let x_t = forward_noise_rows(&x0, &ts, &eps, sched)?;
    Ok(NoisyBatch { ts, eps, x_t })
}

fn diverged(loss: f64, threshold: f64) -> bool {
    !loss.is_finite() || loss > threshold
}

/// Trains a teacher on the denoising loss `mean((eps - eps_hat)^2)`, or loads
/// `teacher.checkpoint` when one is configured.
pub fn train_teacher(cfg: &HarnessConfig, rng: &Rng) -> Result<Mlp> {
    cfg.validate()?;
    if let Some(path) = &cfg.teacher.checkpoint {
        let model = Mlp::load(path)?;
        check_compatible(&model, cfg, "teacher.checkpoint")?;
        return Ok(model);
    }
    let sched = cfg.schedule.build()?;
    let data = shared_dataset(cfg)?;
    let tc = &cfg.teacher;
    let mut model = Mlp::new(data.dim(), sched.steps(), &tc.widths, &mut rng.fork(streams::TEACHER_INIT))?;
    let mut opt = Adam::default();
    let mut train = rng.fork(streams::TEACHER_TRAIN);
    for step in 0..tc.iterations {
        let b = noisy_batch(&data, tc.batch_size, &sched, &mut train)?;
        let fwd = model.forward(&b.x_t, &b.ts)?;
        let (loss, d_out) = outkd_loss_grad(&b.eps, &fwd.output)?;
        if diverged(loss, cfg.distill.divergence_threshold) {
            return Err(Error::Diverged { step, partial: None });
        }
        let grads = model.backward(&fwd.tape, &d_out, None)?;
        opt.step(model.params_mut(), &grads.slices(), tc.lr)?;
    }
    Ok(model)
}

/// [`distill_model`] without the trained student.
pub fn distill(cfg: &HarnessConfig, teacher: &Mlp, rng: &Rng) -> Result<RunReport> {
    distill_model(cfg, teacher, rng).map(|(report, _)| report)
}

/// Trains a student against a frozen teacher with the configured loss stack,
/// then scores samples drawn from it.
///
/// A step whose total loss is not finite or exceeds
/// `distill.divergence_threshold`, or a final sample set that is not finite,
/// stops the run with [`Error::Diverged`] carrying the log so far.
pub fn distill_model(cfg: &HarnessConfig, teacher: &Mlp, rng: &Rng) -> Result<(RunReport, Mlp)> {
    cfg.validate()?;
    check_compatible(teacher, cfg, "teacher")?;
    let start = Instant::now();
    let sched = cfg.schedule.build()?;
    let data = shared_dataset(cfg)?;
    let d = &cfg.distill;

    let mut student = match &cfg.student.checkpoint {
        Some(path) => {
            let m = Mlp::load(path)?;
            check_compatible(&m, cfg, "student.checkpoint")?;
            m
        }
        None => Mlp::new(
            data.dim(),
            sched.steps(),
            &cfg.student.widths,
            &mut rng.fork(streams::STUDENT_INIT),
        )?,
    };
    let t_layer = d.teacher_feature_layer.unwrap_or(teacher.widths().len() - 1);
    let s_layer = d.student_feature_layer.unwrap_or(student.widths().len() - 1);
    let mut regressor = if d.featkd {
        let (tw, sw) = (teacher.widths(), student.widths());
        if t_layer >= tw.len() || s_layer >= sw.len() {
            return Err(Error::config("distill.featkd", "feature layer out of range"));
        }
        Some(LinearMap::init(tw[t_layer], sw[s_layer], &mut rng.fork(streams::REGRESSOR_INIT)))
    } else {
        None
    };

    let mut stack = LossStack::new(d, PlaceLayout::for_dataset(cfg.data.kind));
    let (mut opt, mut reg_opt) = (Adam::default(), Adam::default());
    let mut train = rng.fork(streams::DISTILL);
    let mut report = RunReport::new(rng.seed(), teacher.param_count(), student.param_count(), d.iterations);

    for iter in 0..d.iterations {
        let b = noisy_batch(&data, d.batch_size, &sched, &mut train)?;
        let tf = teacher.forward(&b.x_t, &b.ts)?;
        let sf = student.forward(&b.x_t, &b.ts)?;
        let features = regressor.as_ref().map(|r| FeaturePair {
            teacher: &tf.features[t_layer],
            student: &sf.features[s_layer],
            regressor: r,
        });
        let step = stack.evaluate(&StepInputs {
            iter,
            noise: &b.eps,
            teacher_out: &tf.output,
            student_out: &sf.output,
            features,
        })?;
        let grad_norm = student.backward(&sf.tape, &step.d_diff, None)?.norm();
        let grads = student.backward(
            &sf.tape,
            &step.d_output,
            step.d_features.as_ref().map(|g| (s_layer, g)),
        )?;
        report.log.push(step.breakdown);
        report.grad_norms.push(grad_norm);
        report.degenerate.push(step.degenerate);
        let grads_finite = grads.slices().iter().all(|s| s.iter().all(|v| v.is_finite()));
        if diverged(step.breakdown.total, d.divergence_threshold) || !grads_finite {
            report.wall_clock_secs = start.elapsed().as_secs_f64();
            return Err(Error::Diverged {
                step: iter,
                partial: Some(Box::new(report)),
            });
        }
        opt.step(student.params_mut(), &grads.slices(), d.lr)?;
        if let (Some(r), Some((dw, db))) = (regressor.as_mut(), &step.d_regressor) {
            reg_opt.step(Vec::from(r.params_mut()), &[dw.data(), db.data()], d.lr)?;
        }
    }

    let n = cfg.eval.samples;
    let samples = sample(&student, &sched, &mut rng.fork(streams::SAMPLER), &[n, data.dim()])?;
    if !samples.is_finite() {
        report.wall_clock_secs = start.elapsed().as_secs_f64();
        return Err(Error::Diverged {
            step: d.iterations,
            partial: Some(Box::new(report)),
        });
    }
    let (sw, mean_err, cov_err) = score(cfg, &samples)?;
    report.final_sw = sw;
    report.mean_err = mean_err;
    report.cov_err = cov_err;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((report, student))
}

/// `(sliced_wasserstein, mean_err, cov_err)` of `samples` against a fresh
/// reference set drawn from the config's root seed.
pub fn score(cfg: &HarnessConfig, samples: &Tensor) -> Result<(f64, f64, f64)> {
    let root = Rng::new(cfg.seed);
    let reference = draw(cfg.data.kind, cfg.eval.samples, &mut root.fork(streams::EVAL))?;
    let sw = sliced_wasserstein(
        samples,
        &reference,
        cfg.eval.projections,
        &mut root.fork(streams::PROJECTIONS),
    )?;
    let (mean_err, cov_err) = moment_gap(samples, &reference)?;
    Ok((sw, mean_err, cov_err))
}
