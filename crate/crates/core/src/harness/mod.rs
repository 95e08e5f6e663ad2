//! Experiment harness: configuration, the run loop, logging and presets.

pub mod config;
pub mod experiment;
pub mod log;
pub mod presets;
pub mod run;

pub use config::{Config, ObjectiveSpec, RunConfig, Window};
pub use experiment::{run_experiment, summarize_dir, sweep, verify, Check, Experiment, ExperimentResult};
pub use log::{parse_log, summarize, LogRow, RegretLog, Summary, LOG_HEADER};
pub use presets::{preset, PRESET_NAMES};
pub use run::{run_single, Problem, RunFailure, RunSpec};
