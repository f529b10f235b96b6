//! Config-driven front end for the `intcontrol` solvers.

pub mod config;
pub mod run;

pub use config::{Command, ConfigError, Overrides, RunConfig};
pub use run::{run, Outcome, Status};
