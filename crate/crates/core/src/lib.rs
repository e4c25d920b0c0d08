//! Neural variational dropout processes: a task-conditioned dropout
//! posterior over decoder weights, neural-process baselines, task
//! generators, training and evaluation.

pub mod baselines;
pub mod diff;
pub mod error;
pub mod eval;
pub mod idx;
pub mod model;
pub mod nets;
pub mod noise;
pub mod nvdp;
pub mod setenc;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
