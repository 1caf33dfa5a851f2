//! Gas-well flow forecasting with a deep-LSTM regressor whose output bias is
//! estimated online by a stochastic ensemble Kalman filter.

pub mod data;
pub mod enkf;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
