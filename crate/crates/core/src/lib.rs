//! Stopped symplectic Euler-Maruyama sampling for kinetic Langevin dynamics
//! with singular potentials, together with weak-error and stability
//! diagnostics.
//!
//! The stopped scheme proposes
//!
//! ```text
//! y' = y - delta grad U(x) - delta gamma y + sqrt(2 gamma delta / beta) xi
//! x' = x + delta y'
//! ```
//!
//! and keeps the proposal only when `H(x', y') <= delta^(-l)`; otherwise the
//! chain stays where it is for that step.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod error;
pub mod observables;
pub mod potentials;
pub mod report;
pub mod rng;
pub mod sampler;
pub mod scheme;

pub use error::{Error, EscapeStats, Result};
pub use observables::{Observable, Polynomial};
pub use potentials::{LennardJones, Potential, State};
pub use sampler::{EnsembleResult, RunSpec};
pub use scheme::{SchemeKind, SchemeParams};
