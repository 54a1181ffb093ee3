//! Exact simulation and stability verification for crystal-growth Markov
//! jump processes.
//!
//! * [`model`]: rates, boundary conditions, height differences and the
//!   `Y = Z^{n-1}` coordinate algebra.
//! * [`clocks`] and [`sim`]: shared Poisson clocks and the event-driven
//!   simulator, including coupled and auxiliary processes.
//! * [`kernels`]: discrete-time transition kernels on `Y`.
//! * [`drift`]: Foster-Lyapunov condition checks and exact drift.
//! * [`stats`]: exact stationary laws and Monte Carlo estimators.

pub mod clocks;
pub mod drift;
pub mod error;
pub mod kernels;
pub mod model;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
