//! Command-line pipeline for Bayesian inversion of a 1D parabolic equation:
//! synthetic data, noise estimation, MAP, sampling and diagnostics.

pub mod commands;
pub mod config;
pub mod io;

pub use commands::Run;
pub use config::RunConfig;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "PARABOLIC_INVERT_THREADS";
