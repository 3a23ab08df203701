//! Experiment harness: config parsing, grid execution and CSV records.

pub mod config;
pub mod run;

pub use config::{ConfigError, ExperimentConfig, OptimizerSection, ProblemSection, RunSection};
pub use run::{
    enumerate_cells, run_cell, run_grid, summarize, summary_csv, write_outputs, Cell, CellResult, GridOutcome,
    OptimizerSummary, StepRecord,
};
