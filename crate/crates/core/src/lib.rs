//! Knowledge-driven spatio-temporal graph forecasting of road speeds.

pub mod data;
pub mod embed;
pub mod error;
pub mod graph;
pub mod gru;
pub mod kg;
pub mod kscell;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
