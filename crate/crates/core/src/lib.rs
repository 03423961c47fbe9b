//! Missingness-aware evaluation of screening models.
//!
//! Outcomes are only observed for the encounters where a physician ordered the
//! test. This crate reconstructs a complete-population pseudo-cohort from the
//! observed encounters by inverse probability weighting and evaluates
//! screening models on it: weighted ROC/PRC, matched-threshold PPV/NPV,
//! bootstrap inference, worst-case reweighting sensitivity and survival
//! analysis. A synthetic-population simulator provides ground truth for every
//! estimator.
//!
//! Module map:
//!
//! - [`cohort`]: encounters, outcome bins, patient-level splits and weights
//! - [`propensity`]: probability-of-measurement model and calibration
//! - [`ipw`]: inverse probability weights and the weighted estimators
//! - [`metrics`]: weighted curves, confusion rates and threshold matching
//! - [`inference`]: bootstrap intervals and paired p-values
//! - [`sensitivity`]: adversarial reweighting sweep
//! - [`survival`]: Kaplan-Meier, cumulative incidence and log-rank
//! - [`simulator`]: synthetic populations with known propensities
//! - [`pipeline`]: the end-to-end evaluate / sensitivity / survival runs
//! - [`io`]: CSV and JSON interchange formats

pub mod cohort;
pub mod error;
pub mod inference;
pub mod io;
pub mod ipw;
pub mod metrics;
pub mod pipeline;
pub mod propensity;
pub mod rng;
pub mod sensitivity;
pub mod simulator;
pub mod sum;
pub mod survival;

pub use error::{Error, Result};
