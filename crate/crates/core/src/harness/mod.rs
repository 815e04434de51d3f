//! Experiment front end: configuration, orchestration and result files.

pub mod config;
pub mod output;
pub mod run;

pub use config::{load_config, parse_config, DatasetConfig, ExperimentConfig, ModelConfig, ScheduleConfig, SplitConfig};
pub use output::{emit_plot_data, write_atomic, write_results, PlotKind, Summary};
pub use run::{prepare_data, run_experiment, run_seed, ExperimentResult, SeedRun};
