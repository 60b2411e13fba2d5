use crate::CliError;
use ringscope::config::RunConfig;
use ringscope::exporter::sink::dataset_files;
use ringscope::exporter::{NdjsonSink, NullSink, RankCoords, Sink};
use ringscope::policy::PolicyMode;
use ringscope::sim::{generation_rate, run_multirank, MetricsReport, Mode, SimConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RUN_META_FILE: &str = "run.json";
pub const DROPS_FILE: &str = "drops.json";

/// What to run and where to put it. `None` fields fall back to the config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_path: PathBuf,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub modes: Option<Vec<Mode>>,
    pub ratios: Option<Vec<f64>>,
}

impl RunManifest {
    pub fn new(config_path: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            config_path: config_path.into(),
            seed: None,
            out_dir: out_dir.into(),
            modes: None,
            ratios: None,
        }
    }

    /// The config with overrides applied.
    pub fn load_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(&self.config_path)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(modes) = &self.modes {
            if modes.is_empty() {
                return Err(CliError::Usage("empty mode list".into()));
            }
            cfg.modes = modes.clone();
        }
        if let Some(ratios) = &self.ratios {
            if ratios.iter().any(|&r| !(r > 0.0)) {
                return Err(CliError::Usage("sweep values must be > 0".into()));
            }
            cfg.sweep.ratios = ratios.clone();
        }
        Ok(cfg)
    }
}

/// Written next to each dataset so it can be verified later.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub mode: Mode,
    pub ratio: f64,
    pub seed: u64,
    pub policy: PolicyMode,
    pub ranks: Vec<RankCoords>,
}

/// One `metrics.csv` row. Step rows carry the bytes captured in that step;
/// the `summary` row carries the bytes the sink accepted over the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: String,
    pub mode: Mode,
    pub ratio: f64,
    pub hooks_enabled: usize,
    pub ring_bytes: u64,
    pub wall_time: f64,
    pub stall_time: f64,
    pub drops: u64,
    pub exported_bytes: u64,
    pub overhead_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub label: String,
    pub mode: Mode,
    pub ratio: f64,
    pub run_time: f64,
    pub baseline_time: f64,
    pub overhead_pct: f64,
    pub stall_events: u64,
    pub stall_time: f64,
    pub first_stall_step: Option<u32>,
    pub dropped_request_steps: u64,
    pub captured_bytes: u64,
    pub exported_bytes: u64,
    pub records: u64,
    pub sink_failures: u64,
    pub drain_batches: u64,
    pub dataset: Option<PathBuf>,
    pub dataset_checksum: Option<String>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub points: Vec<PointSummary>,
    pub rows: Vec<MetricsRow>,
}

/// Dataset subdirectory of one rank.
pub fn rank_dir(rank: RankCoords) -> String {
    format!("tp{}-pp{}", rank.tp_rank, rank.pp_stage)
}

/// CRC32 over every rank's index and payload files, in rank order.
pub fn dataset_checksum(dir: &Path, ranks: &[RankCoords]) -> Result<String, CliError> {
    let mut hasher = crc32fast::Hasher::new();
    let mut ranks = ranks.to_vec();
    ranks.sort();
    for rank in ranks {
        let (index, payload) = dataset_files(dir.join(rank_dir(rank)));
        for file in [index, payload] {
            let bytes = fs::read(&file).map_err(|e| CliError::io(file.display().to_string(), e))?;
            hasher.update(&bytes);
        }
    }
    Ok(format!("{:08x}", hasher.finalize()))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| CliError::io(path.display().to_string(), e))
}

fn ratio_label(r: f64) -> String {
    format!("{r}")
}

fn step_rows(report: &MetricsReport, baseline: &MetricsReport, mode: Mode, ratio: f64) -> Vec<MetricsRow> {
    let mut rows: Vec<MetricsRow> = report
        .steps
        .iter()
        .zip(&baseline.steps)
        .map(|(s, b)| MetricsRow {
            step: s.step.to_string(),
            mode,
            ratio,
            hooks_enabled: s.hooks_enabled,
            ring_bytes: s.ring_bytes,
            wall_time: s.wall_time,
            stall_time: s.stall_time,
            drops: s.drops as u64,
            exported_bytes: s.captured_bytes,
            overhead_pct: ringscope::sim::overhead_pct(s.wall_time, b.wall_time),
        })
        .collect();
    rows.push(MetricsRow {
        step: "summary".into(),
        mode,
        ratio,
        hooks_enabled: report.steps.iter().map(|s| s.hooks_enabled).max().unwrap_or(0),
        ring_bytes: report.steps.iter().map(|s| s.ring_bytes).max().unwrap_or(0),
        wall_time: report.run_time,
        stall_time: report.stall_time,
        drops: report.dropped_request_steps,
        exported_bytes: report.exported_bytes,
        overhead_pct: report.overhead_pct,
    });
    rows
}

/// Run one mode at one sweep point, writing its dataset under `dir`.
fn run_point(sim: &SimConfig, mode: Mode, dir: &Path) -> Result<(MetricsReport, bool), CliError> {
    let ranks = sim.topology.ranks();
    let keeps_data = mode != Mode::NoCapture;
    let mut sinks: BTreeMap<RankCoords, Box<dyn Sink>> = BTreeMap::new();
    for &rank in &ranks {
        let sink: Box<dyn Sink> = if keeps_data {
            let path = dir.join(rank_dir(rank));
            Box::new(NdjsonSink::create(&path).map_err(|e| CliError::io(path.display().to_string(), e))?)
        } else {
            Box::new(NullSink::default())
        };
        sinks.insert(rank, sink);
    }
    let run = run_multirank(sim, mode, |r| sinks.remove(&r).expect("one sink per rank"))?;
    Ok((run.metrics, keeps_data))
}

/// Run every (ratio, mode) point of the manifest.
pub fn cmd_run(manifest: &RunManifest) -> Result<RunOutcome, CliError> {
    let cfg = manifest.load_config()?;
    let out = &manifest.out_dir;
    fs::create_dir_all(out).map_err(|e| CliError::io(out.display().to_string(), e))?;
    let resolved = RunManifest {
        seed: Some(cfg.seed),
        modes: Some(cfg.modes.clone()),
        ratios: Some(cfg.sweep.ratios.clone()),
        ..manifest.clone()
    };
    write_json(&out.join(MANIFEST_FILE), &resolved)?;
    let config_path = out.join(CONFIG_FILE);
    fs::write(&config_path, cfg.to_toml()).map_err(|e| CliError::io(config_path.display().to_string(), e))?;

    let mut points = Vec::new();
    let mut rows = Vec::new();
    for ratio in cfg.ratios() {
        let sim = cfg.sim_config(ratio)?;
        let ratio_value = ratio.unwrap_or(generation_rate(&sim)? / sim.engine.d2h_bandwidth);
        let ranks = sim.topology.ranks();
        let baseline = run_multirank(&sim, Mode::NoCapture, |_| Box::new(NullSink::default()))?.metrics;
        for &mode in &cfg.modes {
            let label = format!("{mode}-r{}", ratio_label(ratio_value));
            let dir = out.join("runs").join(&label);
            let (report, has_data) = run_point(&sim, mode, &dir)?;
            rows.extend(step_rows(&report, &baseline, mode, ratio_value));
            let (dataset, dataset_checksum) = if has_data {
                write_json(&dir.join(DROPS_FILE), &report.drop_log)?;
                write_json(
                    &dir.join(RUN_META_FILE),
                    &RunMeta {
                        mode,
                        ratio: ratio_value,
                        seed: cfg.seed,
                        policy: sim.policy.mode,
                        ranks: ranks.clone(),
                    },
                )?;
                (Some(dir.clone()), Some(dataset_checksum(&dir, &ranks)?))
            } else {
                (None, None)
            };
            points.push(PointSummary {
                label,
                mode,
                ratio: ratio_value,
                run_time: report.run_time,
                baseline_time: report.baseline_time,
                overhead_pct: report.overhead_pct,
                stall_events: report.stall_events,
                stall_time: report.stall_time,
                first_stall_step: report.first_stall_step,
                dropped_request_steps: report.dropped_request_steps,
                captured_bytes: report.captured_bytes,
                exported_bytes: report.exported_bytes,
                records: report.records,
                sink_failures: report.sink_failures,
                drain_batches: report.drain_batches,
                dataset,
                dataset_checksum,
            });
        }
    }

    let metrics_path = out.join(METRICS_FILE);
    let io_err = |e: csv::Error| CliError::io(metrics_path.display().to_string(), e.into());
    let mut writer = csv::Writer::from_path(&metrics_path).map_err(io_err)?;
    for row in &rows {
        writer.serialize(row).map_err(io_err)?;
    }
    writer.flush().map_err(|e| CliError::io(metrics_path.display().to_string(), e))?;
    write_json(&out.join(SUMMARY_FILE), &points)?;
    Ok(RunOutcome { points, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")
    }

    #[test]
    fn rank_dirs_name_both_coordinates() {
        assert_eq!(rank_dir(RankCoords { tp_rank: 1, pp_stage: 3 }), "tp1-pp3");
    }

    #[test]
    fn overrides_replace_config_values() {
        let mut m = RunManifest::new(desk(), "out");
        m.seed = Some(5);
        m.modes = Some(vec![Mode::Ring2]);
        m.ratios = Some(vec![3.0]);
        let cfg = m.load_config().unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.modes, vec![Mode::Ring2]);
        assert_eq!(cfg.sweep.ratios, vec![3.0]);
    }

    #[test]
    fn bad_overrides_are_usage_errors() {
        let mut m = RunManifest::new(desk(), "out");
        m.modes = Some(vec![]);
        assert!(matches!(m.load_config(), Err(CliError::Usage(_))));
        m.modes = None;
        for bad in [0.0, -1.0, f64::NAN] {
            m.ratios = Some(vec![1.0, bad]);
            assert!(matches!(m.load_config(), Err(CliError::Usage(_))));
        }
    }

    #[test]
    fn summary_row_closes_each_run() {
        let cfg = RunManifest::new(desk(), "out").load_config().unwrap();
        let sim = cfg.sim_config(Some(2.0)).unwrap();
        let run = |mode| run_multirank(&sim, mode, |_| Box::new(NullSink::default())).unwrap().metrics;
        let base = run(Mode::NoCapture);
        let ring = run(Mode::Ring2);
        let rows = step_rows(&ring, &base, Mode::Ring2, 2.0);
        assert_eq!(rows.len(), ring.steps.len() + 1);
        let last = rows.last().unwrap();
        assert_eq!(last.step, "summary");
        assert_eq!(last.wall_time, ring.run_time);
        let captured: u64 = rows[..rows.len() - 1].iter().map(|r| r.exported_bytes).sum();
        assert_eq!(captured, ring.captured_bytes);
        assert!(rows.iter().all(|r| r.overhead_pct >= 0.0));
    }
}
