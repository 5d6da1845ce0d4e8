//! Infinite-dimensional variational Bayesian inversion for linear PDE
//! inverse problems at desk scale: conjugate mean-field VI, classical
//! regularized baselines, and the amortized VINet model.

pub mod bayes;
pub mod classical;
pub mod data;
pub mod error;
pub mod forward;
pub mod grid;
pub mod linalg;
pub mod mfvi;
pub mod nn;
pub mod prior;
pub mod report;
pub mod vinet;

pub use error::{Error, Result};
pub use grid::{Grid, GridFunction, SpectrumField};
