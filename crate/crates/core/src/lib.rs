//! Meta-graph convolutional recurrent networks for multivariate traffic
//! forecasting.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod export;
pub mod gcru;
pub mod graph_ops;
pub mod meta_learner;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
