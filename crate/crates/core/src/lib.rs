//! Monte Carlo solvers for forward and backward stochastic Volterra integral
//! equations, the associated path-dependent PDE via Feynman–Kac restarts, and
//! closed-form oracles for the linear case.

pub mod backward;
pub mod coefficients;
pub mod condexp;
pub mod error;
pub mod exec;
pub mod forward;
pub mod grid;
pub mod linear_oracle;
pub mod ppde;

pub use error::{Error, Result};
