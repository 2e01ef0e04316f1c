//! Experiment configuration.
//!
//! Every field has a default, so a config file only needs the values it
//! changes. [`HarnessConfig::validate`] runs before any computation and names
//! the offending field on failure.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::diffusion::{linear_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::kd_losses::{CoeffGrad, LiftOptions, LossWeights, SchedulerKind, WeightScheduler};
use crate::place::{PlaceOptions, WeightScope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Eight isotropic Gaussians on a circle of radius 2.
    Gaussians8,
    /// Two-dimensional swiss roll.
    Swissroll,
    /// 1 x 8 x 8 images of smooth random blobs.
    GridPatterns,
}

impl DatasetKind {
    pub fn data_dim(self) -> usize {
        match self {
            DatasetKind::Gaussians8 | DatasetKind::Swissroll => 2,
            DatasetKind::GridPatterns => 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DatasetKind,
    /// Size of the fixed training set.
    pub samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Gaussians8,
            samples: 8192,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    /// 100 steps with the 1000-step DDPM range `[1e-4, 0.02]` scaled by
    /// `1000 / 100`, so that `abar_T` is close to zero.
    fn default() -> Self {
        Self {
            timesteps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        linear_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub widths: Vec<usize>,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Load this checkpoint instead of training a teacher.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            widths: vec![256, 256, 256],
            iterations: 3000,
            batch_size: 128,
            lr: 1e-3,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub widths: Vec<usize>,
    /// Start from this checkpoint instead of a fresh initialization.
    pub checkpoint: Option<PathBuf>,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 16],
            checkpoint: None,
        }
    }
}

/// Target of the diffusion term `L_diff`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffTarget {
    /// `mean((eps_teacher - eps_student)^2)`.
    #[default]
    Teacher,
    /// `mean((eps - eps_student)^2)` against the sampled noise.
    Noise,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerName {
    #[default]
    Adaptive,
    Linear,
    Cosine,
    Fixed,
}

impl SchedulerName {
    pub fn as_str(self) -> &'static str {
        match self {
            SchedulerName::Adaptive => "adaptive",
            SchedulerName::Linear => "linear",
            SchedulerName::Cosine => "cosine",
            SchedulerName::Fixed => "fixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub outkd: bool,
    pub featkd: bool,
    pub lift: bool,
    /// Group-wise LIFT; replaces the single global fit when set.
    pub place: bool,
    pub lambda_diff: f64,
    pub lambda_outkd: f64,
    pub lambda_lift: f64,
    pub lambda_featkd: f64,
    pub group_size: usize,
    pub scheduler: SchedulerName,
    /// Weight used by the `fixed` scheduler.
    pub fixed_w: f64,
    pub relaxed_l2: bool,
    pub coeff_grad: CoeffGrad,
    pub diff_target: DiffTarget,
    pub weight_scope: WeightScope,
    /// Decay of an exponential moving average of the global coarse loss fed
    /// to the adaptive weight; 0 uses the current batch value.
    pub coarse_ema: f64,
    /// Hidden layer tapped for FeatKD; defaults to the last hidden layer.
    pub teacher_feature_layer: Option<usize>,
    pub student_feature_layer: Option<usize>,
    /// A step whose total loss exceeds this, or is not finite, counts as
    /// divergence.
    pub divergence_threshold: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 128,
            lr: 2e-4,
            outkd: false,
            featkd: false,
            lift: true,
            place: true,
            lambda_diff: 1.0,
            lambda_outkd: 1.0,
            lambda_lift: 1.0,
            lambda_featkd: 1e-6,
            group_size: 16,
            scheduler: SchedulerName::Adaptive,
            fixed_w: 1.0,
            relaxed_l2: false,
            coeff_grad: CoeffGrad::Stop,
            diff_target: DiffTarget::Teacher,
            weight_scope: WeightScope::PerGroup,
            coarse_ema: 0.0,
            teacher_feature_layer: None,
            student_feature_layer: None,
            divergence_threshold: 1e6,
        }
    }
}

impl DistillConfig {
    pub fn scheduler(&self) -> WeightScheduler {
        let kind = match self.scheduler {
            SchedulerName::Adaptive => SchedulerKind::Adaptive,
            SchedulerName::Linear => SchedulerKind::Linear,
            SchedulerName::Cosine => SchedulerKind::Cosine,
            SchedulerName::Fixed => SchedulerKind::Fixed(self.fixed_w),
        };
        WeightScheduler {
            kind,
            total_iters: self.iterations.max(1),
        }
    }

    pub fn lift_options(&self) -> LiftOptions {
        LiftOptions {
            relaxed_l2: self.relaxed_l2,
            coeff_grad: self.coeff_grad,
        }
    }

    pub fn place_options(&self) -> PlaceOptions {
        PlaceOptions {
            lift: self.lift_options(),
            weight_scope: self.weight_scope,
        }
    }

    /// Effective multipliers: disabled terms get zero.
    pub fn weights(&self) -> LossWeights {
        let on = |flag: bool, v: f64| if flag { v } else { 0.0 };
        LossWeights {
            diff: self.lambda_diff,
            outkd: on(self.outkd, self.lambda_outkd),
            lift: on(self.lift || self.place, self.lambda_lift),
            featkd: on(self.featkd, self.lambda_featkd),
        }
    }
}

/// Loss stacks compared by the experiment runners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Only the diffusion term.
    FineTune,
    Outkd,
    OutkdFeatkd,
    Lift,
    LiftPlace,
    LiftPlaceFeatkd,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::FineTune => "fine_tune",
            Method::Outkd => "outkd",
            Method::OutkdFeatkd => "outkd_featkd",
            Method::Lift => "lift",
            Method::LiftPlace => "lift_place",
            Method::LiftPlaceFeatkd => "lift_place_featkd",
        }
    }

    /// Sets the term flags of `d` for this method, leaving every λ alone.
    pub fn apply(self, d: &mut DistillConfig) {
        let (outkd, featkd, lift, place) = match self {
            Method::FineTune => (false, false, false, false),
            Method::Outkd => (true, false, false, false),
            Method::OutkdFeatkd => (true, true, false, false),
            Method::Lift => (false, false, true, false),
            Method::LiftPlace => (false, false, true, true),
            Method::LiftPlaceFeatkd => (false, true, true, true),
        };
        d.outkd = outkd;
        d.featkd = featkd;
        d.lift = lift;
        d.place = place;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Samples drawn from the student (and from the data) for metrics.
    pub samples: usize,
    pub projections: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 2000,
            projections: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub teachers: Vec<Vec<usize>>,
    pub students: Vec<Vec<usize>>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Schedulers compared by the scheduler ablation.
    pub schedulers: Vec<SchedulerName>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            teachers: vec![vec![256, 256, 256]],
            students: vec![vec![4, 4]],
            methods: vec![Method::Outkd, Method::LiftPlace],
            seeds: vec![0, 1, 2, 3, 4],
            schedulers: vec![SchedulerName::Adaptive, SchedulerName::Linear, SchedulerName::Cosine],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    /// Root of all randomness; sub-seeds are fixed streams of this seed.
    pub seed: u64,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    pub experiment: ExperimentConfig,
}

fn check(ok: bool, field: &str, reason: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(field, reason()))
    }
}

fn check_widths(widths: &[usize], field: &str) -> Result<()> {
    check(!widths.is_empty(), field, || "need at least one hidden layer".into())?;
    check(!widths.contains(&0), field, || "widths must be positive".into())
}

fn check_lambda(v: f64, field: &str) -> Result<()> {
    check(v.is_finite() && v >= 0.0, field, || format!("{v} must be finite and nonnegative"))
}

impl HarnessConfig {
    pub fn validate(&self) -> Result<()> {
        check(self.data.samples >= 2, "data.samples", || "need at least 2".into())?;
        self.schedule
            .build()
            .map_err(|e| Error::config("schedule", e.to_string()))?;

        check_widths(&self.teacher.widths, "teacher.widths")?;
        check(self.teacher.batch_size >= 1, "teacher.batch_size", || "must be positive".into())?;
        check(self.teacher.lr > 0.0 && self.teacher.lr.is_finite(), "teacher.lr", || "must be positive".into())?;
        check_widths(&self.student.widths, "student.widths")?;

        let d = &self.distill;
        check(d.iterations >= 1, "distill.iterations", || "must be at least 1".into())?;
        check(d.batch_size >= 2, "distill.batch_size", || "must be at least 2".into())?;
        check(d.lr > 0.0 && d.lr.is_finite(), "distill.lr", || "must be positive".into())?;
        check_lambda(d.lambda_diff, "distill.lambda_diff")?;
        check_lambda(d.lambda_outkd, "distill.lambda_outkd")?;
        check_lambda(d.lambda_lift, "distill.lambda_lift")?;
        check_lambda(d.lambda_featkd, "distill.lambda_featkd")?;
        check(d.group_size >= 2, "distill.group_size", || format!("{} is below 2", d.group_size))?;
        check((0.0..=1.0).contains(&d.fixed_w), "distill.fixed_w", || format!("{} is outside [0, 1]", d.fixed_w))?;
        check((0.0..1.0).contains(&d.coarse_ema), "distill.coarse_ema", || format!("{} is outside [0, 1)", d.coarse_ema))?;
        check(d.divergence_threshold > 0.0, "distill.divergence_threshold", || "must be positive".into())?;
        if d.place {
            let positions = match self.data.kind {
                DatasetKind::GridPatterns => 64,
                _ => d.batch_size,
            };
            check(positions % d.group_size == 0, "distill.group_size", || {
                format!("{} does not divide {positions} positions per channel", d.group_size)
            })?;
        }
        if let Some(i) = d.teacher_feature_layer {
            check(i < self.teacher.widths.len(), "distill.teacher_feature_layer", || format!("no hidden layer {i}"))?;
        }
        if let Some(i) = d.student_feature_layer {
            check(i < self.student.widths.len(), "distill.student_feature_layer", || format!("no hidden layer {i}"))?;
        }

        check(self.eval.samples >= 2, "eval.samples", || "need at least 2".into())?;
        check(self.eval.projections >= 1, "eval.projections", || "need at least 1".into())?;

        let e = &self.experiment;
        for w in &e.teachers {
            check_widths(w, "experiment.teachers")?;
        }
        for w in &e.students {
            check_widths(w, "experiment.students")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        HarnessConfig::default().validate().unwrap();
    }

    #[test]
    fn validation_names_field() {
        let mut c = HarnessConfig::default();
        c.distill.group_size = 12;
        match c.validate() {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "distill.group_size"),
            other => panic!("{other:?}"),
        }
        let mut c = HarnessConfig::default();
        c.distill.lambda_lift = -1.0;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig { field, .. }) if field == "distill.lambda_lift"));
        let mut c = HarnessConfig::default();
        c.schedule.beta_end = 1.5;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig { field, .. }) if field == "schedule"));
    }

    #[test]
    fn method_flags() {
        let mut d = DistillConfig::default();
        Method::FineTune.apply(&mut d);
        let w = d.weights();
        assert_eq!((w.outkd, w.lift, w.featkd), (0.0, 0.0, 0.0));
        Method::OutkdFeatkd.apply(&mut d);
        let w = d.weights();
        assert_eq!((w.outkd, w.lift, w.featkd), (1.0, 0.0, 1e-6));
    }

    #[test]
    fn json_round_trip() {
        let c = HarnessConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<HarnessConfig>(&s).unwrap(), c);
    }
}
