//! Real-time smoke mode: the threaded export pipeline behind a producer that
//! sleeps through its compute.

use super::run::{DropEntry, MetricsReport, RankRun, StepMetrics};
use super::{Mode, SimConfig, SimError};
use crate::capture::{capture, CaptureContext, OnRingFull, TensorView};
use crate::exporter::{Exporter, PipelineOptions, RankCoords, Sink};
use crate::policy::{PolicyMode, PolicyState};
use crate::ring::{allocate_rings, DeviceArena};
use std::thread;
use std::time::{Duration, Instant};

#[derive(Clone, Copy, Debug)]
pub struct WallClockOptions {
    /// Multiplier on modeled compute and transfer times.
    pub time_scale: f64,
    /// Give up on a stalled capture after this long.
    pub stall_timeout: Duration,
}

impl Default for WallClockOptions {
    fn default() -> Self {
        Self {
            time_scale: 1.0,
            stall_timeout: Duration::from_secs(10),
        }
    }
}

/// Run the ring2 path on a single rank in real time.
pub fn run_wallclock(
    config: &SimConfig,
    sink: Box<dyn Sink>,
    options: WallClockOptions,
) -> Result<RankRun, SimError> {
    config.validate()?;
    if config.topology.tp_degree * config.topology.pp_stages != 1 {
        return Err(SimError::Config("wall-clock mode runs a single rank".into()));
    }
    let schedule = config.workload.schedule();
    let mut registry = config.registry()?;
    let mut engine = config.engine;
    engine.d2h_bandwidth /= options.time_scale;
    engine.d2h_latency *= options.time_scale;
    let mut arena = DeviceArena::unbounded();
    let ring = allocate_rings(&mut arena, config.ring).map_err(|e| SimError::Config(e.to_string()))?;
    let (mut producer, consumer) = ring.split();
    let exporter = Exporter::spawn(
        consumer,
        config.drain,
        engine,
        sink,
        PipelineOptions {
            queue_capacity: config.host.queue_capacity,
            ..Default::default()
        },
    )?;
    let on_full = match config.policy.mode {
        PolicyMode::Completeness => OnRingFull::Stall,
        PolicyMode::BestEffort => OnRingFull::Fail,
    };
    let mut policy = PolicyState::new();
    let mut metrics = MetricsReport {
        mode: Some(Mode::Ring2),
        baseline_time: schedule.iter().map(|s| s.compute_time * options.time_scale).sum(),
        ..Default::default()
    };
    let run_start = Instant::now();
    let mut failure = None;
    for step in &schedule {
        registry.begin_step();
        let start = Instant::now();
        let ctx = crate::policy::StepContext {
            step_seq: step.seq,
            rank: RankCoords::default(),
            hidden: config.workload.hidden,
            fires_here: None,
        };
        let plan = policy.prepare(&config.policy, &step.requests, &producer.state(), &registry, &ctx);
        let mut sm = StepMetrics {
            step: step.seq,
            hooks_enabled: registry.enabled_count(),
            ..Default::default()
        };
        if plan.flush_before {
            let t = Instant::now();
            exporter.flush()?;
            sm.stall_time += t.elapsed().as_secs_f64();
            sm.stall_events += 1;
        }
        if !plan.dropped.is_empty() {
            sm.drops = plan.dropped.len() as u32;
            metrics.drop_log.push(DropEntry {
                step: step.seq,
                rank: RankCoords::default(),
                requests: plan.dropped.clone(),
            });
        }
        exporter.push_meta(plan.fifo_entries.iter().cloned());
        let compute = Duration::from_secs_f64(step.compute_time * options.time_scale);
        let firing = plan.fifo_entries.len().max(1) as u32;
        if plan.fifo_entries.is_empty() {
            thread::sleep(compute);
        }
        for meta in &plan.fifo_entries {
            thread::sleep(compute / firing);
            let slice = meta.slice_bytes();
            let mut tensor = vec![0u8; slice * step.requests.len()];
            for i in plan.keep.kept_indices() {
                let seed = super::content_seed(config.seed, step.requests[i].id, step.seq, meta.hook_id);
                super::fill_tensor(seed, &mut tensor[i * slice..(i + 1) * slice]);
            }
            let mut shape = vec![step.requests.len()];
            shape.extend_from_slice(&meta.shape);
            let view = TensorView::new(&tensor, &shape, meta.dtype)?;
            let deadline = Instant::now() + options.stall_timeout;
            let mut waiter = || {
                if Instant::now() >= deadline {
                    return None;
                }
                let t = Instant::now();
                thread::sleep(Duration::from_micros(20));
                Some(t.elapsed())
            };
            let outcome = capture(
                &mut CaptureContext {
                    registry: &registry,
                    ring: &mut producer,
                    engine: &engine,
                    on_full,
                    waiter: &mut waiter,
                },
                meta.hook_id,
                step.seq,
                &view,
                &plan.keep,
            );
            match outcome {
                Ok(o) => {
                    if o.stall_waits > 0 {
                        sm.stall_events += 1;
                        sm.stall_time += o.stalled.as_secs_f64();
                    }
                    sm.captured_bytes += o.bytes_written;
                }
                Err(e) => {
                    failure = Some(SimError::from(e));
                    break;
                }
            }
        }
        sm.wall_time = start.elapsed().as_secs_f64();
        sm.ring_bytes = producer.state().occupancy;
        metrics.steps.push(sm);
        if failure.is_some() {
            break;
        }
    }
    let report = exporter.finish();
    metrics.run_time = run_start.elapsed().as_secs_f64();
    if let Some(e) = report.error {
        return Err(e.into());
    }
    if let Some(e) = failure {
        return Err(e);
    }
    metrics.exported_bytes = report.sink.bytes;
    metrics.records = report.sink.records;
    metrics.sink_failures = report.sink.failures;
    metrics.drain_batches = report.drained_batches;
    metrics.stall_time = metrics.steps.iter().map(|s| s.stall_time).sum();
    metrics.stall_events = metrics.steps.iter().map(|s| s.stall_events as u64).sum();
    metrics.first_stall_step = metrics.steps.iter().find(|s| s.stall_events > 0).map(|s| s.step);
    metrics.dropped_request_steps = metrics.steps.iter().map(|s| s.drops as u64).sum();
    metrics.captured_bytes = metrics.steps.iter().map(|s| s.captured_bytes).sum();
    metrics.overhead_pct = super::run::overhead_pct(metrics.run_time, metrics.baseline_time);
    Ok(RankRun {
        rank: RankCoords::default(),
        sink: report.sink,
        metrics,
        events: report.events,
    })
}
