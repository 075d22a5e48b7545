//! Observability condition numbers for dynamical networks.
//!
//! A trajectory of a known network dynamical system is observed with noise
//! at a subset of its nodes. Reconstructing the nearest exact trajectory by
//! weak-constraint Gauss-Newton assimilation and comparing it with the truth
//! gives, per unobserved variable, the ratio of reconstruction error to
//! observation noise: the observability condition number `kappa`.
//!
//! Modules, bottom-up: [`graph`] (topologies and centrality), [`dynamics`]
//! (maps and RK4-sampled flows with Jacobians), [`observe`] (selection
//! operators and noise), [`assimilate`] (the Gauss-Newton solver),
//! [`kappa`] (Monte Carlo estimation and experiment sweeps) and
//! [`experiment`] (config-driven runs behind the `netobs` binary).

pub mod assimilate;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod kappa;
pub mod observe;
pub mod rng;

mod linalg;

pub use error::{Error, Result};
