//! Latent factor models for high-dimensional incomplete rating matrices,
//! trained by a Hessian-free second-order method whose damping adapts to the
//! gradient norm (ACRSLF), alongside fixed-damping, SGD-momentum and Adam
//! baselines.
//!
//! Module map:
//!
//! * [`dataset`]: rating ingestion, splitting and the sparse [`HdiMatrix`].
//! * [`model`]: factors, objective, gradient, RMSE.
//! * [`hvp`]: matrix-free Jacobian, Gauss-Newton and damped curvature products.
//! * [`cg`]: conjugate gradient over a curvature callback.
//! * [`optimize`]: the four optimizers and the early-stopping loop.
//! * [`cli`]: the `acrslf` command-line front end.

pub mod cg;
pub mod cli;
pub mod dataset;
pub mod hvp;
pub mod model;
pub mod optimize;
pub mod synthetic;

pub use cg::{CgConfig, CgOutcome};
pub use dataset::{HdiMatrix, RatingTriple};
pub use hvp::{DampingMode, DampingSpec};
pub use model::{FlatVector, LatentState};
pub use optimize::{EpochRecord, OptimizerConfig, OptimizerKind, TrainConfig, TrainOutcome};
