//! Experiment harness: configuration, datasets, optimization, persistence,
//! training and evaluation commands.

pub mod archive;
pub mod bench;
pub mod checkpoint;
pub mod checks;
pub mod commands;
pub mod config;
pub mod data;
pub mod evaluate;
pub mod metrics;
pub mod optim;
pub mod sample;
pub mod stats;
pub mod train;
