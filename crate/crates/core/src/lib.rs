//! Adaptive manifold guidance for probability-flow ODE sampling, checked
//! against closed-form Gaussian-mixture oracles.

pub mod config;
pub mod divergence;
pub mod dual;
pub mod error;
pub mod experiments;
pub mod field;
pub mod guidance;
pub mod io;
pub mod metrics;
pub mod sampler;
pub mod schedule;
pub mod target;

pub use error::{LabError, Result};
