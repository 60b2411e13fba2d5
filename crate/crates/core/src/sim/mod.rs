//! Virtual-time simulation of an inference workload with capture enabled.
//!
//! A run walks the step schedule on one clock per rank. Each step is planned
//! by the policy, computes for its modeled time, fires its hooks spread evenly
//! over that time and lets the export pipeline progress on the same clock.

mod join;
mod run;
mod tensor;
mod topology;
mod vexport;
mod wallclock;
mod workload;

pub use join::{join_records, JoinReport, JoinedRecord, MissingShard};
pub use run::{
    generation_rate, overhead_pct, run_multirank, run_offline, run_rank, DropEntry, MetricsReport,
    MultiRun, RankRun, StepMetrics,
};
pub use tensor::{content_seed, fill_tensor, shard, unshard, AxisSplit};
pub use topology::RankTopology;
pub use vexport::VirtualExporter;
pub use wallclock::{run_wallclock, WallClockOptions};
pub use workload::{Arrival, ScheduledStep, StepKind, WorkloadSpec};

use crate::capture::{
    install_hooks, CaptureError, DeviceCopyEngine, HookDecl, HookRegistry, ModelSpec,
};
use crate::exporter::{DrainConfig, ExportError};
use crate::policy::PolicyConfig;
use crate::ring::RingConfig;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Capture(#[from] CaptureError),
    #[error(transparent)]
    Export(#[from] ExportError),
}

impl SimError {
    /// A protocol failure (as opposed to a bad configuration).
    pub fn is_protocol(&self) -> bool {
        !matches!(self, SimError::Config(_))
    }
}

/// How captured tensors leave the device.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    /// Hooks compiled out; the baseline.
    #[serde(rename = "no-capture")]
    NoCapture,
    /// Every capture blocks compute for its device-to-host transfer.
    #[serde(rename = "sync")]
    Synchronous,
    /// Synchronous transfer plus a fixed host callback cost per hook firing.
    #[serde(rename = "callback")]
    Callback,
    /// Dual-ring staging with the asynchronous exporter.
    #[serde(rename = "ring2")]
    Ring2,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::NoCapture, Mode::Synchronous, Mode::Callback, Mode::Ring2];

    pub fn name(self) -> &'static str {
        match self {
            Mode::NoCapture => "no-capture",
            Mode::Synchronous => "sync",
            Mode::Callback => "callback",
            Mode::Ring2 => "ring2",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "no-capture" | "none" | "baseline" => Ok(Mode::NoCapture),
            "sync" | "synchronous" => Ok(Mode::Synchronous),
            "callback" | "hooks" => Ok(Mode::Callback),
            "ring2" => Ok(Mode::Ring2),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

fn default_pageable_bandwidth() -> f64 {
    20e9
}
fn infinite() -> f64 {
    f64::INFINITY
}
fn default_callback_overhead() -> f64 {
    50e-6
}
fn default_queue_capacity() -> usize {
    2
}

/// Host-side costs of the export path and of the callback baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostModel {
    /// Staging-to-pageable copy rate, bytes/s.
    #[serde(default = "default_pageable_bandwidth")]
    pub pageable_bandwidth: f64,
    /// Sink write rate, bytes/s.
    #[serde(default = "infinite")]
    pub sink_bandwidth: f64,
    /// Seconds of host work per hook firing in callback mode.
    #[serde(default = "default_callback_overhead")]
    pub callback_overhead: f64,
    /// Capacity of each inter-stage queue, in batches.
    #[serde(default = "default_queue_capacity")]
    pub queue_capacity: usize,
}

impl Default for HostModel {
    fn default() -> Self {
        Self {
            pageable_bandwidth: default_pageable_bandwidth(),
            sink_bandwidth: infinite(),
            callback_overhead: default_callback_overhead(),
            queue_capacity: default_queue_capacity(),
        }
    }
}

/// Everything a run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub workload: WorkloadSpec,
    pub topology: RankTopology,
    pub hooks: Vec<HookDecl>,
    /// Enabled hook names; `None` enables all.
    pub enabled: Option<Vec<String>>,
    pub policy: PolicyConfig,
    pub ring: RingConfig,
    pub drain: DrainConfig,
    pub engine: DeviceCopyEngine,
    pub host: HostModel,
}

impl SimConfig {
    pub fn model(&self) -> ModelSpec {
        ModelSpec {
            layers: self.workload.layers,
            hidden: self.workload.hidden,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let cfg = |e: String| SimError::Config(e);
        self.workload.validate().map_err(cfg)?;
        self.topology
            .validate(self.workload.layers, self.workload.hidden)
            .map_err(cfg)?;
        self.policy.validate().map_err(|e| cfg(e.to_string()))?;
        self.ring.validate().map_err(|e| cfg(e.to_string()))?;
        self.drain.validate().map_err(|e| cfg(e.to_string()))?;
        if !(self.engine.d2h_bandwidth > 0.0) {
            return Err(cfg("d2h_bandwidth must be > 0".into()));
        }
        if !(self.host.pageable_bandwidth > 0.0 && self.host.sink_bandwidth > 0.0) {
            return Err(cfg("host bandwidths must be > 0".into()));
        }
        if self.host.queue_capacity == 0 {
            return Err(cfg("queue_capacity must be > 0".into()));
        }
        self.registry()?;
        Ok(())
    }

    /// The installed hooks with the configured filter applied.
    pub fn registry(&self) -> Result<HookRegistry, SimError> {
        let mut reg = install_hooks(&self.model(), &self.hooks)
            .map_err(|e| SimError::Config(e.to_string()))?;
        if let Some(names) = &self.enabled {
            reg.set_hook_filter(names)
                .map_err(|e| SimError::Config(e.to_string()))?;
            reg.begin_step();
        }
        Ok(reg)
    }

    /// Set the device-to-host bandwidth so that capture generation runs at
    /// `ratio` times the link rate.
    pub fn with_ratio(mut self, ratio: f64) -> Result<Self, SimError> {
        if !(ratio > 0.0) {
            return Err(SimError::Config("ratio must be > 0".into()));
        }
        let rate = generation_rate(&self)?;
        if rate <= 0.0 {
            return Err(SimError::Config("the enabled hooks generate no bytes".into()));
        }
        self.engine.d2h_bandwidth = rate / ratio;
        Ok(self)
    }
}
