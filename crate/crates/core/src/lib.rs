//! Switching nonparametric regression for multi-curve data.

pub mod basis;
pub mod covariance;
pub mod cv;
pub mod data;
pub mod em;
pub mod error;
pub mod inference;
pub mod latent;
pub mod sim;

pub use error::{Error, Result};
