//! Moment steering of particle distributions in Stokes flow driven by microrotors.
//!
//! The crate covers the rotlet flow model, a Hermite polynomial chaos surrogate
//! of the particle distribution, a moment-tracking cost, differential dynamic
//! programming over the surrogate, Monte Carlo validation and finite-time
//! Lyapunov exponent analysis of the optimized flow.

pub mod cost;
pub mod ddp;
pub mod error;
pub mod ftle;
pub mod gpc;
pub mod monte_carlo;
pub mod scenario;
pub mod stokes;

pub use error::{Error, Result};
