//! Multi-run experiments: the capacity-gap grid and the scheduler ablation.
//!
//! Runs are independent and execute on a rayon pool of the requested size;
//! results are collected in grid order, so output does not depend on the
//! worker count.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::diffusion::forward_noise;
use crate::error::{Error, Result};
use crate::models::{param_count, Mlp};
use crate::numerics::{streams, Rng, Tensor};
use crate::place::{error_map, ErrorMap};

use super::config::{HarnessConfig, Method, SchedulerName};
use super::data::draw;
use super::train::{distill, train_teacher, RunReport};

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))
}

/// Result of one run; a diverged run keeps whatever it logged.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub diverged: bool,
    /// `None` only if divergence happened before anything was logged.
    pub report: Option<RunReport>,
}

impl RunOutcome {
    fn from_result(seed: u64, r: Result<RunReport>) -> Result<Self> {
        match r {
            Ok(report) => Ok(Self {
                seed,
                diverged: false,
                report: Some(report),
            }),
            Err(Error::Diverged { partial, .. }) => Ok(Self {
                seed,
                diverged: true,
                report: partial.map(|b| *b),
            }),
            Err(e) => Err(e),
        }
    }

    /// Final sliced-Wasserstein distance; NaN for a diverged run.
    pub fn final_sw(&self) -> f64 {
        match (&self.report, self.diverged) {
            (Some(r), false) => r.final_sw,
            _ => f64::NAN,
        }
    }
}

/// Mean and sample standard deviation (divisor `n - 1`; zero for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// All seeds of one (teacher, student, method) cell.
#[derive(Debug, Clone)]
pub struct GridCell {
    pub method: Method,
    pub teacher_widths: Vec<usize>,
    pub student_widths: Vec<usize>,
    pub teacher_params: usize,
    pub student_params: usize,
    pub runs: Vec<RunOutcome>,
}

impl GridCell {
    /// Mean and standard deviation of the final distance over runs that did
    /// not diverge.
    pub fn summary(&self) -> (f64, f64) {
        let ok: Vec<f64> = self.runs.iter().filter(|r| !r.diverged).map(RunOutcome::final_sw).collect();
        mean_std(&ok)
    }

    pub fn diverged_count(&self) -> usize {
        self.runs.iter().filter(|r| r.diverged).count()
    }
}

#[derive(Debug, Clone)]
pub struct CapacityGapTable {
    pub cells: Vec<GridCell>,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    method: &'a str,
    teacher_params: usize,
    student_params: usize,
    seed: u64,
    final_sw: f64,
    diverged: bool,
    mean: f64,
    std: f64,
}

impl CapacityGapTable {
    pub fn cell(&self, method: Method, teacher_widths: &[usize]) -> Option<&GridCell> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.teacher_widths == teacher_widths)
    }

    /// One row per run; `mean` and `std` repeat the cell summary, which
    /// excludes diverged runs.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for c in &self.cells {
            let (mean, std) = c.summary();
            for r in &c.runs {
                w.serialize(SummaryRow {
                    method: c.method.as_str(),
                    teacher_params: c.teacher_params,
                    student_params: c.student_params,
                    seed: r.seed,
                    final_sw: r.final_sw(),
                    diverged: r.diverged,
                    mean,
                    std,
                })?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains one teacher per entry of `experiment.teachers` (from the root
/// seed), then distills every student and method with every seed.
pub fn capacity_gap_experiment(cfg: &HarnessConfig, workers: usize) -> Result<CapacityGapTable> {
    cfg.validate()?;
    let e = &cfg.experiment;
    if e.teachers.is_empty() || e.students.is_empty() || e.methods.is_empty() || e.seeds.is_empty() {
        return Err(Error::config("experiment", "teachers, students, methods and seeds must be non-empty"));
    }
    let pool = pool(workers)?;
    let dim = cfg.data.kind.data_dim();

    let teachers: Vec<Mlp> = pool.install(|| {
        e.teachers
            .par_iter()
            .map(|widths| {
                let mut c = cfg.clone();
                c.teacher.widths = widths.clone();
                train_teacher(&c, &Rng::new(cfg.seed))
            })
            .collect::<Result<_>>()
    })?;

    struct Job {
        cell: usize,
        teacher: usize,
        seed: u64,
        cfg: HarnessConfig,
    }
    let mut cells = Vec::new();
    let mut jobs = Vec::new();
    for (ti, tw) in e.teachers.iter().enumerate() {
        for sw in &e.students {
            for &method in &e.methods {
                let mut c = cfg.clone();
                c.teacher.widths = tw.clone();
                c.student.widths = sw.clone();
                method.apply(&mut c.distill);
                c.validate()?;
                for &seed in &e.seeds {
                    jobs.push(Job {
                        cell: cells.len(),
                        teacher: ti,
                        seed,
                        cfg: c.clone(),
                    });
                }
                cells.push(GridCell {
                    method,
                    teacher_widths: tw.clone(),
                    student_widths: sw.clone(),
                    teacher_params: teachers[ti].param_count(),
                    student_params: param_count(dim, sw),
                    runs: Vec::new(),
                });
            }
        }
    }

    let outcomes: Vec<RunOutcome> = pool.install(|| {
        jobs.par_iter()
            .map(|j| RunOutcome::from_result(j.seed, distill(&j.cfg, &teachers[j.teacher], &Rng::new(j.seed))))
            .collect::<Result<_>>()
    })?;
    for (j, o) in jobs.iter().zip(outcomes) {
        cells[j.cell].runs.push(o);
    }
    Ok(CapacityGapTable { cells })
}

/// One run per scheduler, all from the root seed and the same teacher.
#[derive(Debug, Clone)]
pub struct SchedulerAblation {
    pub runs: Vec<(SchedulerName, RunOutcome)>,
}

#[derive(Serialize)]
struct AblationRow<'a> {
    scheduler: &'a str,
    final_sw: f64,
    mean_err: f64,
    cov_err: f64,
    final_total: f64,
    diverged: bool,
}

impl SchedulerAblation {
    /// Comparison table, one row per scheduler.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for (name, o) in &self.runs {
            let r = o.report.as_ref();
            let pick = |f: fn(&RunReport) -> f64| if o.diverged { f64::NAN } else { r.map_or(f64::NAN, f) };
            w.serialize(AblationRow {
                scheduler: name.as_str(),
                final_sw: pick(|r| r.final_sw),
                mean_err: pick(|r| r.mean_err),
                cov_err: pick(|r| r.cov_err),
                final_total: r.and_then(|r| r.log.last()).map_or(f64::NAN, |b| b.total),
                diverged: o.diverged,
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn ablate_scheduler(cfg: &HarnessConfig, teacher: &Mlp, workers: usize) -> Result<SchedulerAblation> {
    cfg.validate()?;
    let names = &cfg.experiment.schedulers;
    if names.is_empty() {
        return Err(Error::config("experiment.schedulers", "must be non-empty"));
    }
    let pool = pool(workers)?;
    let outcomes: Vec<RunOutcome> = pool.install(|| {
        names
            .par_iter()
            .map(|&name| {
                let mut c = cfg.clone();
                c.distill.scheduler = name;
                RunOutcome::from_result(cfg.seed, distill(&c, teacher, &Rng::new(cfg.seed)))
            })
            .collect::<Result<_>>()
    })?;
    Ok(SchedulerAblation {
        runs: names.iter().copied().zip(outcomes).collect(),
    })
}

/// Error map `|eps_T - eps_S|` of two denoisers at timestep `t`.
///
/// Image data gives one `1 x 8 x 8` map of a single sample; point data
/// gives a `D x 1 x B` map of a batch of `eval.samples` points, matching the
/// layout used for group-wise training.
pub fn error_map_snapshot(
    cfg: &HarnessConfig,
    teacher: &Mlp,
    student: &Mlp,
    t: usize,
    rng: &Rng,
) -> Result<ErrorMap> {
    let sched = cfg.schedule.build()?;
    let kind = cfg.data.kind;
    let mut r = rng.fork(streams::EVAL);
    let n = match kind {
        super::config::DatasetKind::GridPatterns => 1,
        _ => cfg.eval.samples,
    };
    let x0 = draw(kind, n, &mut r)?;
    let eps = r.randn(x0.shape())?;
    let x_t = forward_noise(&x0, t, &eps, &sched)?;
    let (et, es) = (teacher.predict(&x_t, t)?, student.predict(&x_t, t)?);
    let to_map = |x: Tensor| -> Result<Tensor> {
        match kind {
            super::config::DatasetKind::GridPatterns => x.reshape(&[1, 8, 8]),
            _ => {
                let d = x.row_len();
                x.transpose()?.reshape(&[d, 1, n])
            }
        }
    };
    error_map(&to_map(et)?, &to_map(es)?)
}
