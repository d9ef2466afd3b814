//! Detection and nonparametric correction of misclassification in a
//! discrete reported variable.
//!
//! The crate is organised as a pipeline:
//!
//! * [`dataset`] ingests delimited survey extracts, discretizes them and
//!   builds contingency tables per covariate cell.
//! * [`cimetest`] tests for the presence of misclassification through the
//!   conditional independence of two auxiliary measures given the report.
//! * [`spectral`] identifies the misclassification model in closed form by
//!   an eigendecomposition of observable probability matrices.
//! * [`cmle`] estimates the same model by constrained maximum likelihood
//!   with multiple starting points.
//! * [`latent`] maps identified latent distributions onto linear-projection
//!   and (heteroskedastic) ordered-probit coefficients.
//! * [`bootstrap`] is the shared resampling engine, and [`simulate`]
//!   generates models and data with known ground truth.
//! * [`cli`] wires the stages together behind a single binary.

pub mod bootstrap;
pub mod cimetest;
pub mod cli;
pub mod cmle;
pub mod dataset;
pub mod error;
pub mod latent;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod probit;
pub mod simulate;
pub mod spectral;

pub use error::{Error, Result};
