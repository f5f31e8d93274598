pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod funcalc;
pub mod market;
pub mod optimizer;
pub mod paths;
pub mod report;
pub mod rng;
pub mod stats;
pub mod utility;
pub mod verify;

pub use error::{Error, Result};
