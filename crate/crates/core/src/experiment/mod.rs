//! Run configuration, metrics files, grid sweeps and seed statistics.
//!
//! ```
//! use dfl::experiment::{combine_group_stats, format_pm, RunConfig};
//!
//! let cfg = RunConfig::parse("K = 2\nT = 5\n").unwrap();
//! assert_eq!(cfg.dfl.teachers, 2);
//! assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
//!
//! let (m, s) = combine_group_stats(93.68, 0.13, 93.59, 0.13);
//! assert_eq!(format_pm(m, s), "93.64 ± 0.14");
//! ```

mod config;
mod grid;
mod metrics;
mod run;
mod stats;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{Arch, DatasetKind, RunConfig, SyntheticParams};
pub use grid::{collect_finals, grid_search, GridCell, GridSpec, GridSummary, SUMMARY_FILE};
pub use metrics::{format_sig6, header, read_metrics, record_fields, MetricsWriter};
pub use run::{
    build_for, final_test_acc, is_complete, load_datasets, resolve_data_dir, run_dir, run_single,
    RunOutcome, CHECKPOINT_FILE, CONFIG_FILE, DATA_DIR_ENV, EVENTS_FILE, METRICS_FILE,
};
pub use stats::{aggregate_seeds, combine_group_stats, format_pm, StatsError};

pub use crate::engine::{Event, MetricsRecord};

use crate::data::DataError;
use crate::engine::EngineError;
use crate::model::ModelError;
use crate::optim::OptimError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: malformed metrics: {reason}")]
    Metrics { path: PathBuf, reason: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}
