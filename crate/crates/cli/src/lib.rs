//! Command-line front end: dataset generation, two-stage training, β
//! sweeps, random search, rank statistics and gradient checks. Every
//! artifact-producing command writes a run manifest beside its outputs.

pub mod args;
pub mod commands;
pub mod manifest;
pub mod output;

pub use commands::{exit_code, run, VerificationFailed, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_VERIFICATION};
