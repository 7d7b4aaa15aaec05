//! Config-driven experiment runner: declarative TOML configs, staged run
//! orchestration, sweep expansion, and report rendering.

pub mod config;
pub mod render;
pub mod report;
pub mod run;

pub use config::{expand_sweeps, is_valid, validate, ConfigError, Diagnostic, ExperimentConfig};
pub use report::report;
pub use run::{prepare, resolve_out_dir, run, RunError, RunRecord};
