//! Market equilibrium solver for multi-commodity exchange between locally
//! informed agents.
//!
//! The market state is an `m × n` matrix of transaction volumes: one row per
//! agent, one column per commodity, sales positive and purchases negative.
//! Each agent owns a box of admissible volumes, optionally narrowed to a
//! moving window around the current state, and a polyhedral set of relative
//! price vectors derived from its technology. Equilibria are characterized as
//! solutions of a quasi-variational inequality whose balance multiplier is
//! the vector of market clearing prices.
//!
//! Functionality by module:
//! - [`model`]: scenario data, assumption validators, deterministic instance
//!   generation, JSON serialization.
//! - [`pricing`]: LP price oracle over the technology polytope, the
//!   regularized single-valued price map, and the value functions with their
//!   (sub)gradients.
//! - [`balance`]: exact projection and linear-minimization oracles on
//!   box-plus-balance sets, and the single-commodity equilibrium solver.
//! - [`solvers`]: subgradient projection, the restart-based parametric
//!   conditional gradient method, and an experimental fixed-point iteration.
//! - [`verify`]: equilibrium certificates and brute-force reference oracles.

pub mod balance;
pub mod exec;
mod linalg;
pub mod model;
pub mod pricing;
pub mod solvers;
pub mod verify;

pub use exec::ExecPolicy;
pub use model::{MarketState, Scenario};
