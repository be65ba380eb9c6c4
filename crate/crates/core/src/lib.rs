//! Core numerics for simulation-based inference benchmarking under model
//! misspecification: autodiff, optimizers, tasks, density estimators,
//! posterior approximations and coverage metrics.

pub mod diffcore;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod metrics;
pub mod optim;
pub mod sampling;
pub mod seeding;
pub mod tasks;

pub use error::{Error, Result};
