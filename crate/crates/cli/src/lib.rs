//! Command-line driver: configuration, checkpoints, logs and plots.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod log;
pub mod plot;
