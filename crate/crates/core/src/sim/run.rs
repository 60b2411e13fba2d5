use super::tensor::{content_seed, fill_tensor, shard, AxisSplit};
use super::vexport::VirtualExporter;
use super::workload::ScheduledStep;
use super::{Mode, SimConfig, SimError};
use crate::capture::{capture, CaptureContext, HookRegistry, OnRingFull, TensorView};
use crate::exporter::meta::split_records;
use crate::exporter::{RankCoords, Sink, SinkStage, SinkStats, TensorMeta};
use crate::policy::{KeepDropVector, PolicyMode, PolicyState, StepContext, StepPlan};
use crate::ring::{allocate_rings, DeviceArena, RingState};
use serde::{Deserialize, Serialize};
use std::time::Duration;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u32,
    pub wall_time: f64,
    pub stall_time: f64,
    pub stall_events: u32,
    /// Requests dropped from observation.
    pub drops: u32,
    /// Payload bytes captured in this step.
    pub captured_bytes: u64,
    /// Payload ring occupancy when the step ended.
    pub ring_bytes: u64,
    pub hooks_enabled: usize,
}

/// Requests a rank dropped from observation in one step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropEntry {
    pub step: u32,
    pub rank: RankCoords,
    pub requests: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub mode: Option<Mode>,
    pub steps: Vec<StepMetrics>,
    pub run_time: f64,
    /// Run time of the no-capture baseline with the same seed.
    pub baseline_time: f64,
    pub overhead_pct: f64,
    pub stall_time: f64,
    pub stall_events: u64,
    pub first_stall_step: Option<u32>,
    pub dropped_request_steps: u64,
    pub captured_bytes: u64,
    /// Payload bytes the sink accepted.
    pub exported_bytes: u64,
    pub records: u64,
    pub sink_failures: u64,
    pub drain_batches: u64,
    pub drop_log: Vec<DropEntry>,
}

impl MetricsReport {
    fn finalize(&mut self) {
        self.stall_time = self.steps.iter().map(|s| s.stall_time).sum();
        self.stall_events = self.steps.iter().map(|s| s.stall_events as u64).sum();
        self.first_stall_step = self.steps.iter().find(|s| s.stall_events > 0).map(|s| s.step);
        self.dropped_request_steps = self.steps.iter().map(|s| s.drops as u64).sum();
        self.captured_bytes = self.steps.iter().map(|s| s.captured_bytes).sum();
        self.overhead_pct = overhead_pct(self.run_time, self.baseline_time);
    }
}

pub fn overhead_pct(run_time: f64, baseline_time: f64) -> f64 {
    (run_time - baseline_time) / baseline_time * 100.0
}

/// One rank's run.
#[derive(Debug)]
pub struct RankRun {
    pub rank: RankCoords,
    pub metrics: MetricsReport,
    pub sink: SinkStats,
    /// Export event log (ring2 mode only).
    pub events: Vec<crate::exporter::TimedEvent>,
}

#[derive(Debug)]
pub struct MultiRun {
    pub ranks: Vec<RankRun>,
    /// Steps merged across ranks: slowest wall time, summed counters.
    pub metrics: MetricsReport,
}

/// Run a single-rank topology.
pub fn run_offline(config: &SimConfig, mode: Mode, sink: Box<dyn Sink>) -> Result<RankRun, SimError> {
    if config.topology.tp_degree * config.topology.pp_stages != 1 {
        return Err(SimError::Config("run_offline needs a single-rank topology".into()));
    }
    run_rank(config, mode, RankCoords::default(), sink)
}

/// Run every rank of the topology, each with its own ring, exporter and
/// policy state and no shared traffic.
pub fn run_multirank(
    config: &SimConfig,
    mode: Mode,
    mut sinks: impl FnMut(RankCoords) -> Box<dyn Sink>,
) -> Result<MultiRun, SimError> {
    config.validate()?;
    let ranks = config
        .topology
        .ranks()
        .into_iter()
        .map(|r| run_rank(config, mode, r, sinks(r)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut merged = MetricsReport {
        mode: Some(mode),
        ..Default::default()
    };
    for run in &ranks {
        let m = &run.metrics;
        if merged.steps.is_empty() {
            merged.steps = m.steps.clone();
        } else {
            for (a, b) in merged.steps.iter_mut().zip(&m.steps) {
                a.wall_time = a.wall_time.max(b.wall_time);
                a.stall_time += b.stall_time;
                a.stall_events += b.stall_events;
                a.drops += b.drops;
                a.captured_bytes += b.captured_bytes;
                a.ring_bytes += b.ring_bytes;
                a.hooks_enabled += b.hooks_enabled;
            }
        }
        merged.run_time = merged.run_time.max(m.run_time);
        merged.baseline_time = merged.baseline_time.max(m.baseline_time);
        merged.exported_bytes += m.exported_bytes;
        merged.records += m.records;
        merged.sink_failures += m.sink_failures;
        merged.drain_batches += m.drain_batches;
        merged.drop_log.extend(m.drop_log.iter().cloned());
    }
    merged.finalize();
    Ok(MultiRun {
        ranks,
        metrics: merged,
    })
}

/// Compute seconds of one step on `rank`: its pipeline stage's share of the
/// layers.
fn compute_share(config: &SimConfig, rank: RankCoords) -> f64 {
    let layers = config.workload.layers;
    let owned = (0..layers)
        .filter(|&l| config.topology.stage_of_layer(l, layers) == rank.pp_stage)
        .count();
    owned as f64 / layers as f64
}

/// Capture bytes per second of compute on rank (0, 0), every request kept.
pub fn generation_rate(config: &SimConfig) -> Result<f64, SimError> {
    config.validate()?;
    let rank = RankCoords::default();
    let registry = config.registry()?;
    let mask = config
        .topology
        .fire_mask(&registry, rank, config.workload.layers);
    let hidden = config.topology.shard_width(config.workload.hidden);
    let share = compute_share(config, rank);
    let (mut bytes, mut time) = (0u64, 0f64);
    for step in config.workload.schedule() {
        time += step.compute_time * share;
        for id in registry.enabled_ids().filter(|&id| mask[id as usize]) {
            let spec = &registry.hooks()[id as usize];
            bytes += spec.slice_bytes(step.tokens(), hidden) * step.requests.len() as u64;
        }
    }
    Ok(bytes as f64 / time)
}

struct RankEnv<'a> {
    config: &'a SimConfig,
    registry: HookRegistry,
    rank: RankCoords,
    mask: Vec<bool>,
    hidden_local: usize,
    share: f64,
    full: Vec<u8>,
    piece: Vec<u8>,
}

impl<'a> RankEnv<'a> {
    fn new(config: &'a SimConfig, rank: RankCoords) -> Result<Self, SimError> {
        let registry = config.registry()?;
        let mask = config
            .topology
            .fire_mask(&registry, rank, config.workload.layers);
        Ok(Self {
            hidden_local: config.topology.shard_width(config.workload.hidden),
            share: compute_share(config, rank),
            config,
            registry,
            rank,
            mask,
            full: Vec::new(),
            piece: Vec::new(),
        })
    }

    fn context(&self, step: &ScheduledStep) -> StepContext {
        StepContext {
            step_seq: step.seq,
            rank: self.rank,
            hidden: self.hidden_local,
            fires_here: Some(self.mask.clone()),
        }
    }

    fn firing_count(&self) -> usize {
        self.registry
            .enabled_ids()
            .filter(|&id| self.mask[id as usize])
            .count()
    }

    /// This rank's slice of one request's tensor at `meta`'s hook.
    fn request_slice(&mut self, meta: &TensorMeta, step: &ScheduledStep, request: u64) -> &[u8] {
        let spec = &self.registry.hooks()[meta.hook_id as usize];
        let hidden = self.config.workload.hidden;
        let full_shape = spec.shape.resolve(step.tokens(), hidden);
        let full_len = full_shape.iter().product::<usize>() * spec.dtype.width();
        self.full.resize(full_len, 0);
        let seed = content_seed(self.config.seed, request, step.seq, meta.hook_id);
        fill_tensor(seed, &mut self.full);
        let tp = self.config.topology.tp_degree as usize;
        match spec.shape.shard_axis() {
            Some(axis) if tp > 1 => {
                let split = AxisSplit::new(&full_shape, axis, spec.dtype.width());
                shard(&self.full, split, self.rank.tp_rank as usize, tp, &mut self.piece);
                &self.piece
            }
            _ => &self.full,
        }
    }

    /// The full batch tensor for `meta`'s hook. Rows of dropped requests are
    /// zero; nothing reads them.
    fn batch_tensor(&mut self, meta: &TensorMeta, step: &ScheduledStep, keep: &KeepDropVector) -> Vec<u8> {
        let slice = meta.slice_bytes();
        let mut out = vec![0u8; slice * step.requests.len()];
        for i in keep.kept_indices() {
            let id = step.requests[i].id;
            let s = self.request_slice(meta, step, id);
            out[i * slice..(i + 1) * slice].copy_from_slice(s);
        }
        out
    }

    /// Kept rows only, concatenated: what a gather-compact copy produces.
    fn kept_payload(&mut self, meta: &TensorMeta, step: &ScheduledStep) -> Vec<u8> {
        let mut out = Vec::with_capacity(meta.payload_bytes());
        for &id in &meta.request_ids {
            let s = self.request_slice(meta, step, id);
            out.extend_from_slice(s);
        }
        out
    }
}

/// Run one rank through the whole schedule in `mode`.
pub fn run_rank(
    config: &SimConfig,
    mode: Mode,
    rank: RankCoords,
    sink: Box<dyn Sink>,
) -> Result<RankRun, SimError> {
    config.validate()?;
    let schedule = config.workload.schedule();
    let mut env = RankEnv::new(config, rank)?;
    let baseline_time: f64 = schedule.iter().map(|s| s.compute_time * env.share).sum();
    let mut metrics = MetricsReport {
        mode: Some(mode),
        baseline_time,
        ..Default::default()
    };
    let (sink, events) = match mode {
        Mode::NoCapture => {
            let mut now = 0.0;
            for step in &schedule {
                let dt = step.compute_time * env.share;
                now += dt;
                metrics.steps.push(StepMetrics {
                    step: step.seq,
                    wall_time: dt,
                    ..Default::default()
                });
            }
            metrics.run_time = now;
            drop(sink);
            (SinkStage::null(), Vec::new())
        }
        Mode::Synchronous | Mode::Callback => {
            let mut stage = SinkStage::new(sink);
            run_blocking(&mut env, &schedule, mode, &mut stage, &mut metrics);
            stage.finish();
            (stage, Vec::new())
        }
        Mode::Ring2 => run_ring2(&mut env, &schedule, sink, &mut metrics)?,
    };
    let stats = sink.stats();
    metrics.exported_bytes = stats.bytes;
    metrics.records = stats.records;
    metrics.sink_failures = stats.failures;
    metrics.finalize();
    Ok(RankRun {
        rank,
        metrics,
        sink: stats,
        events,
    })
}

/// Ring state of an idle, empty ring of the configured size.
fn idle_ring_state(config: &SimConfig) -> RingState {
    let mut arena = DeviceArena::unbounded();
    allocate_rings(&mut arena, config.ring)
        .expect("validated ring config")
        .state()
}

/// Synchronous and callback baselines: every capture blocks compute for its
/// transfer, and every request is kept.
fn run_blocking(
    env: &mut RankEnv<'_>,
    schedule: &[ScheduledStep],
    mode: Mode,
    stage: &mut SinkStage,
    metrics: &mut MetricsReport,
) {
    let config = env.config;
    let engine = config.engine;
    let idle = idle_ring_state(config);
    let completeness = crate::policy::PolicyConfig::completeness();
    let mut now = 0.0;
    for step in schedule {
        let start = now;
        let ctx = env.context(step);
        let plan = crate::policy::prepare_step(&completeness, &step.requests, &idle, &env.registry, &ctx);
        let compute = step.compute_time * env.share;
        let firing = plan.fifo_entries.len();
        let mut captured = 0;
        for meta in &plan.fifo_entries {
            now += compute / firing as f64;
            let payload = env.kept_payload(meta, step);
            now += engine.d2h_time(payload.len() as u64).as_secs_f64();
            if mode == Mode::Callback {
                now += config.host.callback_overhead;
            }
            captured += payload.len() as u64;
            stage.sink_write(&split_records(meta, &payload));
        }
        if firing == 0 {
            now += compute;
        }
        metrics.steps.push(StepMetrics {
            step: step.seq,
            wall_time: now - start,
            captured_bytes: captured,
            hooks_enabled: env.firing_count(),
            ..Default::default()
        });
    }
    metrics.run_time = now;
}

fn run_ring2(
    env: &mut RankEnv<'_>,
    schedule: &[ScheduledStep],
    sink: Box<dyn Sink>,
    metrics: &mut MetricsReport,
) -> Result<(SinkStage, Vec<crate::exporter::TimedEvent>), SimError> {
    let config = env.config;
    let mut arena = DeviceArena::unbounded();
    let ring = allocate_rings(&mut arena, config.ring)
        .map_err(|e| SimError::Config(e.to_string()))?;
    let (mut producer, consumer) = ring.split();
    let mut exporter = VirtualExporter::new(
        consumer,
        config.drain,
        config.engine,
        config.host,
        SinkStage::new(sink),
    );
    let on_full = match config.policy.mode {
        PolicyMode::Completeness => OnRingFull::Stall,
        PolicyMode::BestEffort => OnRingFull::Fail,
    };
    let mut policy = PolicyState::new();
    let mut now = 0.0;
    for step in schedule {
        env.registry.begin_step();
        exporter.advance_to(now);
        let start = now;
        let mut sm = StepMetrics {
            step: step.seq,
            hooks_enabled: env.firing_count(),
            ..Default::default()
        };
        let ctx = env.context(step);
        let plan: StepPlan = policy.prepare(
            &config.policy,
            &step.requests,
            &producer.state(),
            &env.registry,
            &ctx,
        );
        if plan.flush_before {
            let done = exporter.flush();
            if done > now {
                sm.stall_time += done - now;
                sm.stall_events += 1;
                now = done;
            }
        }
        if !plan.dropped.is_empty() {
            sm.drops = plan.dropped.len() as u32;
            metrics.drop_log.push(DropEntry {
                step: step.seq,
                rank: env.rank,
                requests: plan.dropped.clone(),
            });
        }
        exporter.push_meta(plan.fifo_entries.iter().cloned());

        let compute = step.compute_time * env.share;
        let firing = plan.fifo_entries.len();
        for meta in &plan.fifo_entries {
            now += compute / firing as f64;
            exporter.advance_to(now);
            let tensor = env.batch_tensor(meta, step, &plan.keep);
            let mut shape = vec![step.requests.len()];
            shape.extend_from_slice(&meta.shape);
            let view = TensorView::new(&tensor, &shape, meta.dtype)?;
            let mut waiter = || {
                let before = exporter.now();
                exporter
                    .wait_for_release()
                    .map(|t| Duration::from_secs_f64(t - before))
            };
            let outcome = capture(
                &mut CaptureContext {
                    registry: &env.registry,
                    ring: &mut producer,
                    engine: &config.engine,
                    on_full,
                    waiter: &mut waiter,
                },
                meta.hook_id,
                step.seq,
                &view,
                &plan.keep,
            );
            let outcome = match outcome {
                Ok(o) => o,
                Err(e) => {
                    return Err(exporter.error().cloned().map(SimError::from).unwrap_or(e.into()));
                }
            };
            if outcome.stall_waits > 0 {
                sm.stall_events += 1;
                sm.stall_time += outcome.stalled.as_secs_f64();
                now = exporter.now();
            }
            now += outcome.copy_time.as_secs_f64();
            if outcome.bytes_written > 0 {
                exporter.published(now);
            }
            exporter.advance_to(now);
            sm.captured_bytes += outcome.bytes_written;
        }
        if firing == 0 {
            now += compute;
        }
        exporter.advance_to(now);
        if let Some(e) = exporter.error() {
            return Err(e.clone().into());
        }
        sm.wall_time = now - start;
        sm.ring_bytes = producer.state().occupancy;
        metrics.steps.push(sm);
    }
    let end = exporter.finish();
    if let Some(e) = exporter.error() {
        return Err(e.clone().into());
    }
    metrics.run_time = now.max(end);
    metrics.drain_batches = exporter.batches();
    let events = exporter.events().to_vec();
    Ok((exporter.into_sink(), events))
}
