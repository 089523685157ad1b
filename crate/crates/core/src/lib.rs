//! Data-driven VCG mechanisms on finite grids, with an exhaustive
//! posterior-equilibrium audit.

pub mod allocation;
pub mod audit;
pub mod config;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod instance;
pub mod report;
pub mod scenarios;
pub mod stats;
pub mod transfers;

pub use error::{Error, Result};
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
