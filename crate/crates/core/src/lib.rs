//! Levenberg-Marquardt and Bayesian-regularization training for small
//! multilayer perceptrons, with a reproducible harness for scarce-data
//! bearing-capacity experiments on the Gandhi footing tests.

pub mod dataset;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod network;
pub mod numkernel;
pub mod trainers;

pub use error::{Error, Result};
