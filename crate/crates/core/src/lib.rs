//! Simulation and policy synthesis for controlled random walks.
//!
//! The crate models slotted-time stochastic queueing networks, builds
//! MaxWeight-style control policies from declarative scheduling fields,
//! executes seeded trajectories, and numerically audits the stability
//! conditions the field constructions are designed around.
//!
//! Module map:
//! - [`model`] — network description, control enumeration, stabilizability.
//! - [`fields`] — cost functions, state perturbations, weight-vector fields.
//! - [`policy`] — per-slot control selection.
//! - [`sim`] — trajectory execution, metrics, parameter sweeps.
//! - [`analysis`] — numerical stability auditors and the drift estimator.
//! - [`rng`] — the pinned counter-based generator behind all randomness.

pub mod analysis;
pub mod expr;
pub mod fields;
pub mod model;
pub mod policy;
pub mod rng;
pub mod sim;
