//! Experiment configuration, orchestration and output.
pub mod config;
pub mod output;
pub mod run;
pub mod twin;

pub use config::{parse_algorithm, ConfigFile, ExperimentConfig, Preset};
pub use output::{csv_string, emit_csv, emit_plot_data, log10_clamped, parse_csv, plot_data_string, ParsedCsv, RunRecord};
pub use run::{build, run, simulate, sweep, sweep_summary, write_record, Experiment, RunOutcome, SweepCell};
pub use twin::{run_twin, OdeTwin, Row, Twin, TwinRun};
