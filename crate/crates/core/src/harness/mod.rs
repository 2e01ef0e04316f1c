//! Training and evaluation harness: teacher pretraining, distillation with a
//! configurable loss stack, multi-run experiments and sample metrics.

pub mod config;
pub mod data;
pub mod experiment;
pub mod metrics;
pub mod train;

pub use config::{
    DataConfig, DatasetKind, DiffTarget, DistillConfig, EvalConfig, ExperimentConfig, HarnessConfig, Method,
    ScheduleConfig, SchedulerName, StudentConfig, TeacherConfig,
};
pub use data::Dataset;
pub use experiment::{
    ablate_scheduler, capacity_gap_experiment, error_map_snapshot, mean_std, CapacityGapTable, GridCell,
    RunOutcome, SchedulerAblation,
};
pub use metrics::{moment_gap, sliced_wasserstein, wasserstein2_sorted};
pub use train::{
    distill, distill_model, score, shared_dataset, train_teacher, FeaturePair, LossStack, PlaceLayout, RunReport,
    StepInputs, StepLoss,
};
