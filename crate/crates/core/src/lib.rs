//! Gaussian-process surrogate forecasting for stochastic ensemble simulators.
//!
//! The pipeline collapses replicated simulator output into moments
//! ([`repstats`]), emulates it with a heteroskedastic surrogate built on
//! Vecchia-approximated GPs ([`vecchia`], [`surrogate`]), learns the
//! simulator's discrepancy against field observations ([`biascorrect`]) and
//! runs a daily forecasting loop over five comparator models ([`engine`]).
//! Forecasts are scored with [`metrics`].

pub mod biascorrect;
pub mod campaign;
pub mod cli;
pub mod config;
pub mod covkernel;
pub mod densegp;
pub mod engine;
pub mod error;
pub mod gp;
pub mod io;
mod kdtree;
pub mod lakesim;
mod linalg;
pub mod metrics;
pub mod optim;
pub mod persist;
pub mod repstats;
pub mod surrogate;
pub mod vecchia;

pub use covkernel::{ColumnRole, DesignMatrix, Hyperparams};
pub use densegp::{DenseGp, PredictiveMoments, VarianceScale};
pub use error::{Error, Result};
