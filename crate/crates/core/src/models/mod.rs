//! Small differentiable denoisers, the FeatKD regressor and Adam.

mod dense;
mod mlp;
mod optim;

pub use dense::{Dense, DenseGrad, DenseRecord, LinearMap};
pub use mlp::{param_count, time_embedding, Checkpoint, Forward, GradTape, Mlp, ParamGrads, TIME_EMBED_DIM};
pub use optim::Adam;
