//! Configuration-driven experiment runner and report emitter: generate a
//! synthetic cohort, split it, partition the training folds across clients,
//! train every strategy, evaluate with paired bootstrap and Wilcoxon tests,
//! and tabulate.

pub mod config;
pub mod data;
mod error;
pub mod report;
pub mod runner;

pub use config::{parse_config, parse_config_str, ExperimentConfig, Setting, Strategy, Task};
pub use error::RunError;
pub use report::{emit_report, format_cell, ReportFormat};
pub use runner::{run_experiment, write_outputs, ExperimentResult, FailedCell, FoldId, MetricRow};
