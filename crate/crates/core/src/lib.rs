//! Solver and simulation harness for linear-quadratic mean-field social
//! optimization.
//!
//! The crate computes the coefficient functions of the quadratic
//! value-function ansatz for a population of cooperatively controlled
//! diffusions, synthesizes the feedback law, simulates the N-agent
//! closed-loop system with common noise, and measures how close the
//! feedback law comes to person-by-person optimality at finite N.
//!
//! Module map:
//! - [`ode`] — fixed-step RK4 backward integration of terminal-value systems
//! - [`model`] — LQ model data, validation, initial-state sampling
//! - [`value`] — coefficient ODE systems for the value function, the mean
//!   adjustment term, and the instrumental value function
//! - [`field`] — pointwise evaluation of the value surfaces, the control
//!   law, measure derivatives, and the minimizer functional
//! - [`rng`] — counter-based Gaussian streams for reproducible parallel runs
//! - [`sim`] — Euler–Maruyama simulation of the interacting particle system
//! - [`pbp`] — person-by-person optimality gap and scaling experiments
//! - [`systemic_risk`] — the inter-bank lending/borrowing example, exact
//!   finite-N solution and master-equation solution
//! - [`stats`] — small statistics helpers (stderr, least squares, Kendall tau)

pub mod error;
pub mod field;
pub mod fixtures;
pub mod model;
pub mod ode;
pub mod pbp;
pub mod rng;
pub mod sim;
pub mod stats;
pub mod systemic_risk;
pub mod value;

pub use error::{Error, Result};
