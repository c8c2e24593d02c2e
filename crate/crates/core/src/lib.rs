//! Partial-identification bounds for conditional average treatment effects
//! when the target population carries covariates that were never observed in
//! the study population.
//!
//! The study population provides covariates `V`, a binary treatment `A`, and a
//! bounded outcome `Y`; the target population provides `V` together with new
//! discrete covariates `W` but no treatment or outcome data. Marginal
//! consistency of the conditional effect across levels of `W` (an ecological
//! inference argument) partially identifies the effect conditional on both
//! `V` and `W`, yielding per-unit worst-case bounds and a `δ`-parameterized
//! sensitivity-model refinement.
//!
//! The crate provides:
//!
//! - [`data_model`]: the coarsened observation structure, outcome bounds and
//!   W-support enumeration shared by every other module.
//! - [`nuisance`]: pluggable learners for the outcome regressions,
//!   propensities and the W-given-V model, plus controlled perturbation for
//!   error-injection experiments.
//! - [`bounds`]: pointwise worst-case and sensitivity-model bounds.
//! - [`estimator`]: plug-in and influence-function bias-corrected projection
//!   estimators of the bound functions, with two-fold cross-fitting.
//! - [`inference`]: sandwich covariance and a nonparametric bootstrap.
//! - [`baseline_dr`]: a doubly-robust restricted-CATE baseline.
//! - [`benchmarking`]: data-driven calibration of the sensitivity parameter.
//! - [`simulation`] and [`experiments`]: a fully specified synthetic data
//!   generating process with ground truth, and the Monte Carlo drivers.
//! - [`ingest`]: CSV ingestion against a column-role map.

pub mod baseline_dr;
pub mod benchmarking;
pub mod bounds;
pub mod data_model;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod inference;
pub mod ingest;
pub mod learners;
pub mod nuisance;
pub mod rng;
pub mod simulation;

pub use bounds::{BoundPair, SensitivityLevel};
pub use data_model::{CovariateProfile, Dataset, ObservedSample, OutcomeBounds, WSupport};
pub use error::{Error, Result};
pub use estimator::{BetaEstimate, ModelSpec, ProjectionPopulation, Side};
pub use inference::CovarianceEstimate;
pub use nuisance::{LearnerSpec, NuisanceSet, PerturbationSpec};
pub use simulation::{DgpConfig, GroundTruth};
