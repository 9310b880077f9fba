//! Static mean-field games with monotone payoffs.
//!
//! The crate builds payoff operators over a finite action set, solves the
//! Tikhonov-regularized mean-field equilibrium problem with an exact payoff
//! oracle, and simulates `N` independent learners running regularized
//! projected ascent under full or bandit feedback.

pub mod dynamics;
pub mod equilibrium;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod payoffs;
pub mod rng;
pub mod simplex;

pub use error::{Error, Result};
pub use payoffs::PayoffOperator;
pub use simplex::{EmpiricalMeasure, SimplexPoint};
