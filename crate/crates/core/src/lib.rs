//! Conditional mid-quantile regression for discrete responses.
//!
//! The estimator runs in two steps: kernel estimates of the conditional
//! mid-probabilities at every sample point, then a closed-form regression
//! of linearly interpolated mid-quantiles on the covariates.

pub mod cli;
pub mod error;
pub mod fit;
pub mod inference;
pub mod kernel_cdf;
pub mod mid_distributions;
pub mod model;
pub mod sim;
pub mod transform;

pub use error::{MidQrError, Result};
