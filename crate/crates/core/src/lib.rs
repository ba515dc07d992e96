//! Separable direct and indirect treatment effects on a cause-specific risk in
//! continuous-time competing-risks data.
//!
//! The crate fits Cox models for the two cause-specific hazards (and the
//! censoring hazard), a logistic propensity model, and combines them into three
//! estimators of counterfactual risk contrasts:
//!
//! * the Cox plug-in estimator with an analytic influence-function standard error
//!   ([`functionals`]),
//! * the one-step estimator built on the efficient influence function ([`eif`]),
//! * targeted maximum likelihood ([`tmle`]).
//!
//! [`simulation`] generates data with known truth and runs replication studies,
//! and [`inference`] wraps any estimator in a nonparametric bootstrap.

pub mod data;
pub mod eif;
pub mod error;
pub mod exec;
pub mod functionals;
pub mod inference;
pub mod nuisance;
pub mod simulation;
pub mod tmle;

pub use data::{CsvSchema, Dataset, Event, Record};
pub use error::{Error, Result};
pub use exec::Execution;
pub use functionals::{Estimand, RiskCurve, SurvivalForm};
pub use nuisance::{CoxFit, Design, NuisanceSet, NuisanceSpec, Propensity, StepFunction};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
