//! Command-line pipeline around `remind-core`: configuration, the RMDS
//! container, and the gen-data / train / rollout / diagnose / ablate
//! commands.

pub mod commands;
pub mod config;
pub mod container;

pub use config::{Provenance, RunConfig};
