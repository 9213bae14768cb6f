//! Federated learning simulator with quality-aware client selection,
//! zero-concentrated differential privacy, and a two-stage Stackelberg
//! incentive game solved in closed form and cross-checked numerically.
//!
//! The crate is organized around the pipeline a single experiment follows:
//!
//! 1. [`data`] builds a labeled dataset and partitions it across simulated
//!    clients (IID or Dirichlet Non-IID).
//! 2. [`selection`] filters clients by the L1 distance between their label
//!    distribution and a reference distribution.
//! 3. [`game`] computes the per-round equilibrium reward and privacy
//!    budgets, with independent best-response oracles for verification.
//! 4. [`privacy`] clips updates, calibrates and injects Gaussian noise,
//!    and tracks budget composition.
//! 5. [`model`] trains a multinomial logistic classifier under federated
//!    averaging.
//! 6. [`strategies`] wires the above into the six named training strategies
//!    and records per-round outcomes.

pub mod data;
pub mod game;
pub mod model;
pub mod params;
pub mod privacy;
pub mod seeding;
pub mod selection;
pub mod strategies;

pub use params::ParameterVector;
