//! Orchestration for the coverage benchmark: configuration, the run matrix
//! with resumable cells, curve persistence, SVG panel grids, the summary
//! report and the self-test suites behind the CLI.

pub mod config;
pub mod error;
pub mod matrix;
pub mod plot;
pub mod records;
pub mod report;
pub mod selftest;

pub use config::{Algorithm, AlgorithmSpec, BenchConfig, Cell, Variant};
pub use error::{BenchError, Result};
pub use matrix::{run_matrix, RunOptions, RunSummary};
pub use plot::{emit_plots, PlotOutcome};
pub use records::{read_records, RunRecord, Status};
pub use report::{emit_report, ReportOutcome};
