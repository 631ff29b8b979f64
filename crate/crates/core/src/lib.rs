//! Variable-metric projection-type (VMPT) optimization on convex sets, with
//! a two-phase phase-field mean-compliance problem as the main application.
//!
//! The crate is organized bottom-up: [`sparse`] linear algebra, [`fem`]
//! assembly and elasticity, [`pdas`] for the projection subproblem,
//! [`metrics`] for the inner products `a_k`, [`phasefield`] for the reduced
//! functional and [`solver`] for the outer loop. [`experiment`] wires them
//! into reproducible runs.

pub mod error;
pub mod experiment;
pub mod fem;
pub mod metrics;
pub mod pdas;
pub mod phasefield;
pub mod solver;
pub mod sparse;

pub use error::{Result, VmptError};
