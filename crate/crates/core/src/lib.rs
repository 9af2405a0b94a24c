//! Traffic forecasting and deep Q-learning load balancing for a simulated
//! fat-tree software-defined network.

pub mod agents;
pub mod config;
pub mod dataset;
pub mod env;
pub mod error;
pub mod forecaster;
pub mod nn;
pub mod pipeline;
pub mod topology;

pub use error::{Error, Result};
