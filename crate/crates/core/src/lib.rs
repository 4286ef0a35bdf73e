//! Desk-scale simulator for federated recommendation with first-order
//! meta-learning, user-level differential privacy, ranking evaluation and
//! membership-inference measurement.

pub mod attack;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod federation;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod privacy;

pub use error::{Error, Result};
