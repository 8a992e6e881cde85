//! Local GD / Local SGD on deep ReLU networks, with probes for the
//! quantities that govern their convergence: client drift, local model
//! deviation, gradient-norm ratios, smoothness residuals, local-loss
//! shrinkage and per-round linear rates.

pub mod data;
pub mod error;
pub mod experiment;
pub mod federated;
pub mod network;
pub mod numerics;
pub mod probes;

pub use error::{Error, Result};
