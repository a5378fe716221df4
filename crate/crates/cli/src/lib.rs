//! Batch front end for retina-bench: experiment configs, single runs and
//! grids, reports and statistical comparisons.

pub mod compare;
pub mod config;
pub mod error;
pub mod grid;
pub mod plots;
pub mod prep;
pub mod report;
pub mod runner;
pub mod select;

pub use error::{CliError, Result};
