//! Experiment runner: cached pipeline stages, grid sweeps and plot data.

pub mod config;
pub mod pipeline;
pub mod plot;
pub mod sweep;
