//! Robust losses and prediction-entropy regularization for learning with
//! noisy labels.
//!
//! The crate is layered bottom-up: [`numerics`] holds softmax, entropy and a
//! finite-difference oracle; [`losses`] defines the per-sample losses and the
//! entropy-regularized batch objective; [`noise`] corrupts labels; [`model`]
//! holds the linear/MLP heads and SGD; [`data`] loads datasets; and
//! [`experiment`] ties everything into configurable training runs.

pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod noise;
pub mod numerics;
pub mod rng;

pub use error::{Error, Result};
pub use losses::{LambdaSchedule, LossKind, LossParams, LossSpec};
pub use noise::{ClassFlipMap, NoiseKind, NoiseSpec};
pub use numerics::{DenseMatrix, LabelVector, ProbBatch};
