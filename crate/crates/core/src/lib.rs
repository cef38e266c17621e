//! Synthetic potential outcomes (SPOs): average and mixture treatment effects
//! from confounded observational data through multilinear moments.
//!
//! Pipeline: [`moments::estimate_bundle`] (or [`synthetic::exact_bundle`])
//! produces a [`MomentBundle`]; [`spo`] turns it into the ATE and the response
//! moments `nu_1..nu_{2k-1}`; [`moment_problem`] recovers the mixture of
//! treatment effects. [`baseline`] holds the CP-decomposition baseline and the
//! evaluation metrics, [`experiment`] the sweep harness behind the CLI.

pub mod baseline;
pub mod domain;
pub mod error;
pub mod experiment;
pub mod moment_problem;
pub mod moments;
pub mod spo;
pub mod synthetic;

pub use domain::{
    split_by_treatment, validate_dataset, Dataset, MixtureOfEffects, MomentBundle,
    MomentSequence, SpoCoefficients, Violation,
};
pub use error::{Error, Result};
