//! Numerical homogenization of elliptic, monotone and Stokes-type problems with
//! two scales of oscillation in general deterministic and stochastic settings.

pub mod corrector;
pub mod dynsys;
pub mod error;
pub mod fem;
pub mod grid;
pub mod harness;
pub mod linalg;
pub mod meanval;
pub mod model;
pub mod profile;
pub mod rng;
pub mod sigma;
pub mod solvers;
pub mod stats;
pub mod stokes;

pub use error::{Error, Result};
