use crate::run::RunManifest;
use crate::CliError;
use ringscope::exporter::NullSink;
use ringscope::policy::{PolicyConfig, PolicyMode};
use ringscope::sim::{run_multirank, Mode};
use serde::{Deserialize, Serialize};
use std::fs;

pub const OVERLOAD_FILE: &str = "overload.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverloadRow {
    pub hooks_enabled: usize,
    pub ring_capacity: u64,
    pub ratio: f64,
    pub policy: PolicyMode,
    pub overhead_pct: f64,
    pub stall_events: u64,
    pub first_stall_step: Option<u32>,
    pub drops: u64,
    pub exported_bytes: u64,
}

/// Overload-onset grid over hook-set size, ring capacity and ratio, for
/// Completeness and a best-effort policy. The ratio fixes the link rate
/// against the full hook set, so smaller sets run below it.
pub fn cmd_sweep_overload(manifest: &RunManifest) -> Result<Vec<OverloadRow>, CliError> {
    let cfg = manifest.load_config()?;
    let base = cfg.sim_config(None)?;
    let all_hooks: Vec<String> = {
        let mut full = base.clone();
        full.enabled = None;
        full.registry()?.hooks().iter().map(|h| h.name.clone()).collect()
    };
    let counts = if cfg.sweep.hook_counts.is_empty() {
        vec![base.registry()?.enabled_count()]
    } else {
        cfg.sweep.hook_counts.clone()
    };
    let capacities = if cfg.sweep.ring_capacities.is_empty() {
        vec![base.ring.payload_capacity]
    } else {
        cfg.sweep.ring_capacities.clone()
    };
    let best_effort = match cfg.policy.mode {
        PolicyMode::BestEffort => cfg.policy.clone(),
        PolicyMode::Completeness => PolicyConfig {
            pressure_watermark: cfg.policy.pressure_watermark,
            ..PolicyConfig::drop_recent()
        },
    };
    let policies = [
        PolicyConfig {
            pressure_watermark: cfg.policy.pressure_watermark,
            ..PolicyConfig::completeness()
        },
        best_effort,
    ];

    let mut rows = Vec::new();
    for ratio in cfg.ratios() {
        let mut calibrated = base.clone();
        calibrated.enabled = None;
        let bandwidth = match ratio {
            Some(r) => calibrated.clone().with_ratio(r)?.engine.d2h_bandwidth,
            None => base.engine.d2h_bandwidth,
        };
        let ratio_value = ratio.unwrap_or_else(|| {
            ringscope::sim::generation_rate(&calibrated).unwrap_or(0.0) / bandwidth
        });
        for &count in &counts {
            if count > all_hooks.len() {
                return Err(CliError::Usage(format!(
                    "hook count {count} exceeds the {} installed hooks",
                    all_hooks.len()
                )));
            }
            for &capacity in &capacities {
                for policy in &policies {
                    let mut sim = base.clone();
                    sim.engine.d2h_bandwidth = bandwidth;
                    sim.enabled = Some(all_hooks[..count].to_vec());
                    sim.ring.payload_capacity = capacity;
                    sim.policy = policy.clone();
                    let m = run_multirank(&sim, Mode::Ring2, |_| Box::new(NullSink::default()))?.metrics;
                    rows.push(OverloadRow {
                        hooks_enabled: count,
                        ring_capacity: capacity,
                        ratio: ratio_value,
                        policy: policy.mode,
                        overhead_pct: m.overhead_pct,
                        stall_events: m.stall_events,
                        first_stall_step: m.first_stall_step,
                        drops: m.dropped_request_steps,
                        exported_bytes: m.exported_bytes,
                    });
                }
            }
        }
    }

    let out = &manifest.out_dir;
    fs::create_dir_all(out).map_err(|e| CliError::io(out.display().to_string(), e))?;
    let path = out.join(OVERLOAD_FILE);
    let io_err = |e: csv::Error| CliError::io(path.display().to_string(), e.into());
    let mut writer = csv::Writer::from_path(&path).map_err(io_err)?;
    for row in &rows {
        writer.serialize(row).map_err(io_err)?;
    }
    writer.flush().map_err(|e| CliError::io(path.display().to_string(), e))?;
    Ok(rows)
}
