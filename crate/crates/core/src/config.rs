//! Run configuration files.
//!
//! ```toml
//! seed = 7
//! modes = ["no-capture", "sync", "ring2"]
//!
//! [workload]
//! layers = 8
//! hidden = 256
//! batch = 8
//! prefill_tokens = 16
//! decode_steps = 48
//! prefill_time = 0.004
//! decode_time = 0.002
//!
//! [[hooks]]
//! name = "hidden"
//! scope = "per_layer"
//! shape = ["tokens", "hidden"]
//! dtype = "bf16"
//!
//! [ring]
//! payload_capacity = 262144
//! meta_slots = 256
//!
//! [engine]
//! ratio = 0.5
//!
//! [sweep]
//! ratios = [0.5, 2.0]
//! ```

use crate::capture::{DeviceCopyEngine, HookDecl};
use crate::exporter::DrainConfig;
use crate::policy::PolicyConfig;
use crate::ring::RingConfig;
use crate::sim::{HostModel, Mode, RankTopology, SimConfig, SimError, WorkloadSpec};
use serde::{Deserialize, Serialize};
use std::path::Path;

fn default_modes() -> Vec<Mode> {
    vec![Mode::NoCapture, Mode::Synchronous, Mode::Ring2]
}

/// Device copy costs. The link rate is given either directly or as the
/// generation/bandwidth ratio it should produce.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    pub d2h_bandwidth: Option<f64>,
    pub ratio: Option<f64>,
    pub d2h_latency: Option<f64>,
    pub launch_overhead: Option<f64>,
    pub d2d_bandwidth: Option<f64>,
}

/// Axes for multi-point runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Generation/bandwidth ratios.
    #[serde(default)]
    pub ratios: Vec<f64>,
    /// Number of hooks enabled, taken in graph order.
    #[serde(default)]
    pub hook_counts: Vec<usize>,
    /// Payload ring capacities in bytes.
    #[serde(default)]
    pub ring_capacities: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub topology: RankTopology,
    pub hooks: Vec<HookDecl>,
    #[serde(default)]
    pub enabled: Option<Vec<String>>,
    #[serde(default)]
    pub policy: PolicyConfig,
    pub ring: RingConfig,
    #[serde(default)]
    pub drain: DrainConfig,
    #[serde(default)]
    pub engine: EngineSection,
    #[serde(default)]
    pub host: HostModel,
    #[serde(default)]
    pub sweep: SweepSection,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Invalid(#[from] SimError),
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.into()));
        if self.modes.is_empty() {
            return bad("at least one mode is required");
        }
        match (self.engine.d2h_bandwidth, self.engine.ratio) {
            (Some(_), Some(_)) => return bad("give engine.d2h_bandwidth or engine.ratio, not both"),
            (Some(b), None) if !(b > 0.0) => return bad("engine.d2h_bandwidth must be > 0"),
            (None, Some(r)) if !(r > 0.0) => return bad("engine.ratio must be > 0"),
            _ => {}
        }
        if self.sweep.ratios.iter().any(|&r| !(r > 0.0)) {
            return bad("sweep ratios must be > 0");
        }
        if self.sweep.hook_counts.contains(&0) {
            return bad("sweep hook counts must be > 0");
        }
        self.sim_config(self.ratios()[0])?.validate()
    }

    /// Ratio points to run: the sweep axis, else the engine ratio, else one
    /// point at the configured bandwidth.
    pub fn ratios(&self) -> Vec<Option<f64>> {
        if !self.sweep.ratios.is_empty() {
            self.sweep.ratios.iter().map(|&r| Some(r)).collect()
        } else {
            vec![self.engine.ratio]
        }
    }

    /// Simulator config at one ratio point (`None` keeps the configured
    /// bandwidth).
    pub fn sim_config(&self, ratio: Option<f64>) -> Result<SimConfig, SimError> {
        let defaults = DeviceCopyEngine::default();
        let engine = DeviceCopyEngine {
            d2h_bandwidth: self.engine.d2h_bandwidth.unwrap_or(defaults.d2h_bandwidth),
            d2h_latency: self.engine.d2h_latency.unwrap_or(defaults.d2h_latency),
            launch_overhead: self.engine.launch_overhead.unwrap_or(defaults.launch_overhead),
            d2d_bandwidth: self.engine.d2d_bandwidth.unwrap_or(defaults.d2d_bandwidth),
        };
        let cfg = SimConfig {
            seed: self.seed,
            workload: self.workload.clone(),
            topology: self.topology,
            hooks: self.hooks.clone(),
            enabled: self.enabled.clone(),
            policy: self.policy.clone(),
            ring: self.ring,
            drain: self.drain,
            engine,
            host: self.host,
        };
        match ratio {
            Some(r) => cfg.with_ratio(r),
            None => Ok(cfg),
        }
    }
}
