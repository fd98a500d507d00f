//! Experiment runner for the kolmo engines: configuration, presets, the
//! orchestrated run with its report, and the acceptance suite.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod checks;
pub mod config;
pub mod oracle;
pub mod presets;
pub mod run;

pub use config::{load_config, parse_config, ConfigError, ExperimentConfig, Selector};
pub use run::{run, write_outputs, RunOutcome, RunReport};

/// Process exit codes.
pub mod exit {
    pub const PASS: i32 = 0;
    pub const CHECK_FAILED: i32 = 1;
    pub const CONFIG_ERROR: i32 = 2;
}
