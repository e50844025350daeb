//! Multi-type continuous-state branching processes on countable type
//! spaces, built as super Markov chains with local and non-local
//! branching mechanisms.
//!
//! The crate computes the analytical objects of such processes — the
//! cumulant semigroup, the moment-semigroup spectral radius through its
//! truncation scheme, global/local extinction probabilities, and the
//! spine (tilted-chain) identities — and cross-verifies them against an
//! exact branching-particle Monte Carlo built from the same mechanism
//! data.

pub mod cumulant;
pub mod fixtures;
pub mod extinction;
pub mod model;
pub mod ode;
pub mod particle;
pub mod spine;
pub mod spectral;

pub use model::{ModelSpec, TypeVector};

// matrices appear in the public API; re-export the crate behind them
pub use nalgebra;
