//! Covariate-balancing doubly robust (CBDR) estimation of the value of
//! individualized treatment rules.
//!
//! The crate covers the whole pipeline: data ingestion and imputation of
//! partially observed predictive covariates, logistic propensity models fit
//! by likelihood or by covariate-balancing GMM, linear outcome models with
//! treatment interactions, AIPW value estimation with influence-function
//! variance, value search over linear rules, and a Monte Carlo harness for
//! four synthetic benchmark scenarios.

pub mod cli;
pub mod dataset;
pub mod design;
pub mod error;
mod linalg;
pub mod missingness;
pub mod optim;
pub mod outcome;
pub mod policy;
pub mod propensity;
pub mod seeding;
pub mod simulation;
pub mod value;

pub use dataset::{AugmentedDataset, Dataset, Schema, SplitSpec};
pub use design::{Design, DesignId};
pub use error::{Error, Result};
pub use missingness::ImputationScheme;
pub use outcome::OutcomeModel;
pub use policy::{LinearRule, SearchSettings};
pub use propensity::{BalanceFunction, FitMethod, GmmSettings, PropensityModel};
pub use value::{EstimateOptions, EstimatorKind, ValueEstimate};

/// Lower clamp for fitted probabilities used in inverse weights.
pub const PROB_EPS: f64 = 1e-6;
