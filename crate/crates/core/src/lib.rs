//! Variational continual learning with mean-field Gaussian MLPs.
//!
//! Each task's approximate posterior becomes the prior of the next task.
//! Networks share a ReLU body across tasks and route each task through its
//! own output head (or a single shared head). Everything numeric is generic
//! over [`Scalar`]; the `*64` aliases below fix the element type to `f64`,
//! which is what the experiment pipeline uses.

pub mod analysis;
pub mod bnn;
pub mod error;
pub mod matrix;
pub mod mnist;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod trainer;

pub use bnn::{BayesianNetwork, MeanFieldLayer, PosteriorSnapshot, PredictiveMode, SnapshotStage};
pub use error::{Error, Result};
pub use matrix::{log_softmax_rows, matmul, Matrix};
pub use mnist::{Benchmark, RawDataset, TaskDataset, TaskSpec};
pub use objective::{kl_diag_gaussians, minibatch_elbo, ElboBreakdown, GradientSet};
pub use optim::{AdamConfig, AdamState};
pub use rng::{sample_standard_normal, SeededRng};
pub use scalar::Scalar;
pub use trainer::{ExperimentConfig, MetricsTable};

pub type Matrix64 = Matrix<f64>;
pub type Network64 = BayesianNetwork<f64>;
pub type Layer64 = MeanFieldLayer<f64>;
pub type Snapshot64 = PosteriorSnapshot<f64>;
pub type TaskDataset64 = TaskDataset<f64>;
pub type Gradients64 = GradientSet<f64>;
