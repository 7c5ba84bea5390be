//! Experiment harness: config parsing and validation, deterministic
//! seed-fanned run loops, JSONL metrics logging, windowed aggregation, and
//! SVG plot emission for the loss-of-plasticity toolkit.

pub mod aggregate;
pub mod config;
pub mod plot;
pub mod runlog;
pub mod runners;

pub use config::{ExperimentConfig, ExperimentKind};
pub use runlog::{RunHeader, RunLogWriter};
