//! Operational surface around the core simulator: config files, the
//! experiment runner, and chart emission. The `qi-dpfl` binary is a thin
//! wrapper over these modules.

pub mod config;
pub mod plot;
pub mod runner;
