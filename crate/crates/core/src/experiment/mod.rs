//! Configuration, orchestration and output of the elliptic experiment.

pub mod config;
pub mod emit;
pub mod run;
pub mod svg;
pub mod sweep;

pub use config::ExperimentConfig;
pub use emit::{emit_run, emit_sweep, read_series_csv, write_series_csv};
pub use run::{prepare_run, run, run_indexed, Problem, RunInputs, RunRecord, SeriesRow, Stat, StopRecord};
pub use sweep::{median, quartiles, summarize, sweep, SummaryRow, SweepResult};
