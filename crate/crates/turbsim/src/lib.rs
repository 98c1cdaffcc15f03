//! Command-line and service layer for the turbulence simulator.

pub mod bench;
pub mod config;
pub mod generate;
pub mod pipeline;
pub mod service;
pub mod validate;

pub use config::RunConfig;
