//! Config files, single runs, sweeps and their on-disk artifacts.

mod config;
mod metrics;
mod runner;

pub use config::{
    validate_config, ConfigErrors, DataSection, ExperimentConfig, FedSection, IdxSource, SweepSpec,
    SyntheticSource, SWEEP_PARAMS,
};
pub use metrics::{MetricsLog, RunHeader, CSV_HEADER};
pub use runner::{
    accuracy, cell_name, execute, format_value, load_config, prepare, run_experiment, sweep,
    sweep_cell, ExperimentError, ExperimentResult, PreparedRun, RunOutput, RunSummary, SweepCell,
    SweepOutput, SweepRow, CONFIG_FILE, METRICS_FILE, SUMMARY_FILE, SWEEP_CELLS_FILE,
    SWEEP_SUMMARY_FILE,
};
