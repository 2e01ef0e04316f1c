//! Coarse-to-fine knowledge distillation for diffusion denoisers.
//!
//! A student denoiser is trained to follow a teacher through a least-squares
//! view of their disagreement: the affine part of the error (coefficients of
//! the fit of teacher on student) is penalized separately from the residual
//! that no affine correction can remove, and the two are blended by a weight
//! that grows as the affine part vanishes. The group-wise variant fits
//! separate coefficients on groups of elements sorted by current error.
//!
//! * [`numerics`]: tensors, seeded randomness, moments.
//! * [`regression`]: closed-form least squares and its derivatives.
//! * [`kd_losses`]: output, feature, coarse, fine and combined losses.
//! * [`place`]: error maps, sorted grouping and the group-wise loss.
//! * [`diffusion`]: noise schedules, ancestral sampling, corrected sampling.
//! * [`models`]: MLP denoisers with manual backprop, Adam.
//! * [`harness`]: datasets, training loops, experiments, metrics.

pub mod diffusion;
pub mod error;
pub mod harness;
pub mod kd_losses;
pub mod models;
pub mod numerics;
pub mod place;
pub mod regression;

pub use error::{Error, Result};
pub use harness::{HarnessConfig, RunReport};
pub use kd_losses::{CoeffGrad, LiftOptions, LossBreakdown, LossWeights, SchedulerKind, WeightScheduler};
pub use models::{Mlp, LinearMap};
pub use numerics::{Rng, Tensor};
pub use place::{ErrorMap, GroupPartition, PlaceOptions, WeightScope};
pub use regression::RegressionCoeffs;
pub use diffusion::{Denoiser, NoiseSchedule};
