//! Command-line pipeline for the Laguerre NMPC toolchain: one declarative
//! TOML configuration drives data generation, training, map rendering,
//! closed-loop simulation, quantization, and benchmarking.

pub mod commands;
pub mod config;
