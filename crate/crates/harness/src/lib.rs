//! Experiment harness: configuration, dataset and surrogate pipelines, CNN
//! training, and accuracy sweeps over crossbar designs.

pub mod cli;
pub mod config;
pub mod container;
pub mod digits;
pub mod error;
pub mod experiment;
pub mod model;
pub mod train;

pub use error::{HarnessError, Result};
