//! Command-line driver for ringscope experiments.
//!
//! Three entry points:
//!
//! - [`cmd_run`] runs every (mode, ratio) point of a config and writes
//!   `metrics.csv`, `summary.json` and one capture dataset per point.
//! - [`cmd_verify`] re-runs the synchronous oracle and compares a dataset
//!   against it record by record.
//! - [`cmd_sweep_overload`] runs the hook-count × ring-capacity × ratio grid
//!   and writes `overload.csv`.

mod overload;
mod run;
mod verify;

pub use overload::{cmd_sweep_overload, OverloadRow, OVERLOAD_FILE};
pub use run::{
    cmd_run, dataset_checksum, rank_dir, MetricsRow, PointSummary, RunManifest, RunMeta, RunOutcome,
    CONFIG_FILE, DROPS_FILE, MANIFEST_FILE, METRICS_FILE, RUN_META_FILE, SUMMARY_FILE,
};
pub use verify::{cmd_verify, VerifyReport};

use ringscope::config::ConfigError;
use ringscope::sim::SimError;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_MISMATCH: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Sim(e) if e.is_protocol() => EXIT_MISMATCH,
            _ => EXIT_CONFIG,
        }
    }
}
