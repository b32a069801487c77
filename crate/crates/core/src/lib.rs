//! Learning when-to-treat policies with advantage doubly robust (ADR) scores.
//!
//! The crate is organized bottom-up:
//!
//! - [`data`]: trajectories, datasets, cross-fitting folds, history features, CSV I/O.
//! - [`policy`]: regular when-to-treat policies, linear thresholding grids, policy vectors.
//! - [`regress`]: weighted multi-output regressors (forest, kNN, ridge, lookup table).
//! - [`nuisance`]: cross-fitted propensities and outcome regressions.
//! - [`estimators`]: ADR scores and value estimators (ADR, weighted ADR, IPW, WIPW, AIPW).
//! - [`fittedq`]: fitted-Q baselines.
//! - [`sim`]: data-generating processes, oracle rollouts and an enumerable toy MDP.
//! - [`experiments`]: policy learning over grids and benchmark tables.

pub mod data;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod fittedq;
pub mod policy;
pub mod provenance;
pub mod nuisance;
pub mod regress;
pub mod rng;
pub mod sim;

pub use error::{Error, ErrorKind, Result};
