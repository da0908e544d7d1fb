pub mod bridge;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gaussian_path;
pub mod matching;
pub mod metrics;
pub mod nn;
pub mod plot;
pub mod schedule;
pub mod sde;

pub use error::{Error, Result};
