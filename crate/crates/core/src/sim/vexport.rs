//! The export pipeline as event processes on a virtual clock.
//!
//! Same stages as the threaded pipeline: one device-to-host link used by the
//! drain, a stage worker copying into pageable memory, a sink worker. Each
//! busy stage holds one batch and a completion time; instantaneous decisions
//! (starting a drain, starting a stage) are taken whenever the clock moves.

use super::HostModel;
use crate::capture::DeviceCopyEngine;
use crate::exporter::drain::{fill_staging, stage_to_pageable, StagingBuffer};
use crate::exporter::{
    complete_transfer, evaluate_trigger, ready_summary, reconstruct, select_batch, DrainConfig,
    ExportError, ExportEvent, PageableBatch, PoolStats, SinkStage, StagedBatch, StagingPool,
    TensorMeta, TensorMetaFifo, TimedEvent, TriggerReason,
};
use crate::ring::RingConsumer;
use std::collections::VecDeque;
use std::time::Duration;

pub struct VirtualExporter {
    consumer: RingConsumer,
    config: DrainConfig,
    engine: DeviceCopyEngine,
    host: HostModel,
    fifo: TensorMetaFifo,
    pool: StagingPool,
    sink: SinkStage,
    now: f64,
    publish_times: VecDeque<f64>,
    flush: bool,
    link: Option<(f64, StagedBatch)>,
    staged: VecDeque<StagedBatch>,
    stage: Option<(f64, StagedBatch)>,
    pageable: VecDeque<PageableBatch>,
    deliver: Option<(f64, PageableBatch)>,
    blocked_logged: bool,
    events: Vec<TimedEvent>,
    keep_events: bool,
    batches: u64,
    transferred_bytes: u64,
    error: Option<ExportError>,
}

impl VirtualExporter {
    pub fn new(
        consumer: RingConsumer,
        config: DrainConfig,
        engine: DeviceCopyEngine,
        host: HostModel,
        sink: SinkStage,
    ) -> Self {
        Self {
            consumer,
            pool: StagingPool::new(&config),
            config,
            engine,
            host,
            fifo: TensorMetaFifo::new(),
            sink,
            now: 0.0,
            publish_times: VecDeque::new(),
            flush: false,
            link: None,
            staged: VecDeque::new(),
            stage: None,
            pageable: VecDeque::new(),
            deliver: None,
            blocked_logged: false,
            events: Vec::new(),
            keep_events: true,
            batches: 0,
            transferred_bytes: 0,
            error: None,
        }
    }

    /// Stop recording the event log (long runs).
    pub fn without_event_log(mut self) -> Self {
        self.keep_events = false;
        self
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn consumer(&self) -> &RingConsumer {
        &self.consumer
    }

    pub fn push_meta<I: IntoIterator<Item = TensorMeta>>(&mut self, metas: I) {
        self.fifo.extend(metas);
    }

    /// Tell the drain a descriptor became ready at `at`.
    pub fn published(&mut self, at: f64) {
        self.publish_times.push_back(at);
    }

    pub fn error(&self) -> Option<&ExportError> {
        self.error.as_ref()
    }

    pub fn batches(&self) -> u64 {
        self.batches
    }

    pub fn transferred_bytes(&self) -> u64 {
        self.transferred_bytes
    }

    pub fn events(&self) -> &[TimedEvent] {
        &self.events
    }

    pub fn pool_stats(&self) -> PoolStats {
        self.pool.stats()
    }

    fn log(&mut self, event: ExportEvent) {
        if self.keep_events {
            self.events.push(TimedEvent {
                at: Duration::from_secs_f64(self.now),
                event,
            });
        }
    }

    /// Run every event up to and including time `t`, then move the clock to `t`.
    pub fn advance_to(&mut self, t: f64) {
        loop {
            self.settle();
            match self.next_event() {
                Some(at) if at <= t => self.step_to(at),
                _ => break,
            }
        }
        if t > self.now {
            self.now = t;
            self.settle();
        }
    }

    /// Run events until ring space is released. Returns the release time, or
    /// `None` when nothing pending could free space.
    pub fn wait_for_release(&mut self) -> Option<f64> {
        let before = self.consumer.state().tail_position;
        loop {
            self.settle();
            let at = self.next_event()?;
            self.step_to(at);
            if self.consumer.state().tail_position != before {
                return Some(self.now);
            }
        }
    }

    /// Drain regardless of thresholds until the payload ring is empty.
    /// Returns the completion time.
    pub fn flush(&mut self) -> f64 {
        self.flush = true;
        while self.consumer.state().occupancy > 0 && self.error.is_none() {
            self.settle();
            let Some(at) = self.next_event() else { break };
            self.step_to(at);
        }
        self.flush = false;
        self.now
    }

    /// Flush and let every in-flight batch reach the sink.
    pub fn finish(&mut self) -> f64 {
        self.flush = true;
        loop {
            self.settle();
            let Some(at) = self.next_event() else { break };
            self.step_to(at);
        }
        self.flush = false;
        self.sink.finish();
        self.now
    }

    pub fn into_sink(self) -> SinkStage {
        self.sink
    }

    pub fn sink(&self) -> &SinkStage {
        &self.sink
    }

    fn next_event(&self) -> Option<f64> {
        let mut next: Option<f64> = None;
        let mut consider = |t: f64| next = Some(next.map_or(t, |n: f64| n.min(t)));
        if let Some((t, _)) = &self.link {
            consider(*t);
        }
        if let Some((t, _)) = &self.stage {
            consider(*t);
        }
        if let Some((t, _)) = &self.deliver {
            consider(*t);
        }
        if self.link.is_none() && self.pool.available() > 0 && self.error.is_none() {
            if let Some(&first) = self.publish_times.front() {
                consider((first + self.config.max_wait.as_secs_f64()).max(self.now));
            }
        }
        next
    }

    fn step_to(&mut self, at: f64) {
        self.now = self.now.max(at);
        let now = self.now;
        if self.link.as_ref().is_some_and(|(t, _)| *t <= now) {
            let (_, batch) = self.link.take().unwrap();
            if let Err(e) = complete_transfer(&mut self.consumer, &batch) {
                self.error.get_or_insert(e);
            }
            self.log(ExportEvent::TransferDone {
                buffer: batch.buffer.id(),
                bytes: batch.bytes,
            });
            self.staged.push_back(batch);
        }
        if self.stage.as_ref().is_some_and(|(t, _)| *t <= now) {
            let (_, batch) = self.stage.take().unwrap();
            let (pageable, buffer) = stage_to_pageable(batch);
            self.return_buffer(buffer);
            self.pageable.push_back(pageable);
        }
        if self.deliver.as_ref().is_some_and(|(t, _)| *t <= now) {
            let (_, batch) = self.deliver.take().unwrap();
            self.deliver_batch(batch);
        }
        self.settle();
    }

    fn return_buffer(&mut self, buffer: StagingBuffer) {
        let id = buffer.id();
        self.pool.give_back(buffer);
        self.blocked_logged = false;
        self.log(ExportEvent::BufferReturned { buffer: id });
    }

    fn deliver_batch(&mut self, batch: PageableBatch) {
        for (desc, payload) in &batch.entries {
            if self.error.is_some() {
                return;
            }
            match reconstruct(desc, payload, &mut self.fifo) {
                Ok(records) => {
                    let before = self.sink.stats().failures;
                    self.sink.sink_write(&records);
                    if self.sink.stats().failures > before {
                        self.log(ExportEvent::SinkFailure);
                    }
                    self.log(ExportEvent::Delivered {
                        records: records.len(),
                    });
                }
                Err(e) => self.error = Some(e),
            }
        }
    }

    /// Take every decision that costs no time at the current instant.
    fn settle(&mut self) {
        loop {
            let mut progressed = false;
            if self.deliver.is_none() {
                if let Some(batch) = self.pageable.pop_front() {
                    let t = self.now + batch.bytes as f64 / self.host.sink_bandwidth;
                    self.deliver = Some((t, batch));
                    progressed = true;
                }
            }
            if self.stage.is_none() && self.pageable.len() < self.host.queue_capacity {
                if let Some(batch) = self.staged.pop_front() {
                    let t = self.now + batch.bytes as f64 / self.host.pageable_bandwidth;
                    self.stage = Some((t, batch));
                    progressed = true;
                }
            }
            if self.link.is_none() && self.error.is_none() && self.try_start_drain() {
                progressed = true;
            }
            if !progressed {
                return;
            }
        }
    }

    fn try_start_drain(&mut self) -> bool {
        let (entries, bytes) = ready_summary(&self.consumer);
        if entries == 0 {
            debug_assert!(self.publish_times.is_empty(), "publish times out of step with the ring");
            return false;
        }
        // compare on the same float expression the timeout event uses
        let max_wait = self.config.max_wait;
        let waited = self.publish_times.front().map(|&t| {
            if self.now >= t + max_wait.as_secs_f64() {
                max_wait
            } else {
                Duration::ZERO
            }
        });
        let Some(reason) = evaluate_trigger(&self.config, entries, bytes, waited, self.flush) else {
            return false;
        };
        let Some(buffer) = self.pool.checkout() else {
            if !self.blocked_logged {
                self.blocked_logged = true;
                self.log(ExportEvent::StagingBlocked);
            }
            return false;
        };
        let count = match select_batch(&self.consumer, &self.config) {
            Ok(n) => n,
            Err(e) => {
                self.pool.give_back(buffer);
                self.error = Some(e);
                return false;
            }
        };
        self.start_transfer(buffer, count, reason);
        true
    }

    fn start_transfer(&mut self, buffer: StagingBuffer, count: usize, reason: TriggerReason) {
        let batch = fill_staging(&mut self.consumer, buffer, count, &self.engine, reason);
        for _ in 0..batch.entries.len() {
            self.publish_times.pop_front();
        }
        self.log(ExportEvent::DrainIssued {
            reason,
            entries: batch.entries.len(),
            bytes: batch.bytes,
            buffer: batch.buffer.id(),
        });
        self.batches += 1;
        self.transferred_bytes += batch.bytes;
        let done = self.now + batch.transfer_time.as_secs_f64();
        self.link = Some((done, batch));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::DType;
    use crate::exporter::{MemorySink, RankCoords};
    use crate::ring::{allocate_rings, Descriptor, DeviceArena, RingConfig, RingProducer};
    use std::sync::{Arc, Mutex};

    fn meta(step: u32, len: usize) -> TensorMeta {
        TensorMeta {
            hook_id: 0,
            hook_name: "h".into(),
            layer: None,
            step_seq: step,
            rank: RankCoords::default(),
            request_ids: vec![1],
            token_ranges: vec![(0, 1)],
            shape: vec![len],
            dtype: DType::U8,
        }
    }

    fn engine(bw: f64) -> DeviceCopyEngine {
        DeviceCopyEngine {
            d2h_bandwidth: bw,
            d2h_latency: 0.0,
            ..Default::default()
        }
    }

    fn host() -> HostModel {
        HostModel {
            pageable_bandwidth: f64::INFINITY,
            ..Default::default()
        }
    }

    fn setup(
        cap: u64,
        cfg: DrainConfig,
        bw: f64,
    ) -> (RingProducer, VirtualExporter, Arc<Mutex<MemorySink>>) {
        let ring = allocate_rings(&mut DeviceArena::unbounded(), RingConfig::new(cap, 64)).unwrap();
        let (p, c) = ring.split();
        let sink = Arc::new(Mutex::new(MemorySink::default()));
        let ex = VirtualExporter::new(c, cfg, engine(bw), host(), SinkStage::new(Box::new(sink.clone())));
        (p, ex, sink)
    }

    fn put(p: &mut RingProducer, ex: &mut VirtualExporter, step: u32, len: usize, at: f64) {
        ex.advance_to(at);
        ex.push_meta([meta(step, len)]);
        let r = p.reserve_payload(len as u64).unwrap();
        p.region_mut(&r).fill(step as u8);
        p.publish(Descriptor::new(r.offset, r.len, 0, step)).unwrap();
        ex.published(at);
    }

    fn drains(ex: &VirtualExporter) -> Vec<(TriggerReason, usize, u64)> {
        ex.events()
            .iter()
            .filter_map(|e| match e.event {
                ExportEvent::DrainIssued { reason, entries, bytes, .. } => Some((reason, entries, bytes)),
                _ => None,
            })
            .collect()
    }

    fn lazy() -> DrainConfig {
        DrainConfig {
            min_ready_entries: 1000,
            min_ready_bytes: 1 << 30,
            max_wait: Duration::from_secs(100),
            staging_buffer_size: 1 << 20,
            staging_buffer_count: 2,
        }
    }

    #[test]
    fn four_entries_make_one_batched_transfer() {
        let cfg = DrainConfig {
            min_ready_entries: 4,
            ..lazy()
        };
        let (mut p, mut ex, sink) = setup(1 << 16, cfg, 1e9);
        for s in 0..4 {
            put(&mut p, &mut ex, s, 1024, 0.0);
        }
        ex.advance_to(1.0);
        assert_eq!(drains(&ex), [(TriggerReason::Entries, 4, 4096)]);
        assert_eq!(sink.lock().unwrap().records.len(), 4);
    }

    #[test]
    fn nothing_ready_means_no_transfer() {
        let (_p, mut ex, _) = setup(1 << 16, DrainConfig::default(), 1e9);
        ex.advance_to(1.0);
        assert!(drains(&ex).is_empty());
        assert_eq!(ex.flush(), 1.0);
    }

    #[test]
    fn timeout_fires_after_max_wait() {
        let cfg = DrainConfig {
            max_wait: Duration::from_millis(2),
            ..lazy()
        };
        let (mut p, mut ex, _) = setup(1 << 16, cfg, 1e9);
        put(&mut p, &mut ex, 0, 64, 0.010);
        ex.advance_to(0.0119);
        assert!(drains(&ex).is_empty());
        ex.advance_to(0.0121);
        assert_eq!(drains(&ex), [(TriggerReason::Timeout, 1, 64)]);
        let at = ex.events()[0].at.as_secs_f64();
        assert!((at - 0.012).abs() < 1e-9);
    }

    #[test]
    fn flush_time_matches_bandwidth_model() {
        let (mut p, mut ex, _) = setup(1 << 20, lazy(), 1e8);
        for s in 0..10 {
            put(&mut p, &mut ex, s, 50_000, 0.0);
        }
        let done = ex.flush();
        let want = 500_000.0 / 1e8;
        assert!((done - want).abs() / want < 0.10, "{done} vs {want}");
        assert_eq!(ex.consumer().state().occupancy, 0);
    }

    #[test]
    fn stall_waits_for_the_next_release() {
        let cfg = DrainConfig {
            min_ready_entries: 1,
            ..lazy()
        };
        let (mut p, mut ex, _) = setup(1024, cfg, 1e6);
        put(&mut p, &mut ex, 0, 1024, 0.0);
        assert!(p.reserve_payload(16).is_err());
        let t = ex.wait_for_release().unwrap();
        assert!((t - 1024.0 / 1e6).abs() < 1e-12);
        assert!(p.reserve_payload(16).is_ok());
    }

    #[test]
    fn single_buffer_serializes_drains() {
        let cfg = DrainConfig {
            min_ready_entries: 1,
            staging_buffer_count: 1,
            ..lazy()
        };
        let ring = allocate_rings(&mut DeviceArena::unbounded(), RingConfig::new(1 << 16, 64)).unwrap();
        let (mut p, c) = ring.split();
        let slow_stage = HostModel {
            pageable_bandwidth: 1e6,
            ..Default::default()
        };
        let mut ex = VirtualExporter::new(c, cfg, engine(1e9), slow_stage, SinkStage::null());
        put(&mut p, &mut ex, 0, 1000, 0.0);
        put(&mut p, &mut ex, 1, 1000, 0.0);
        ex.finish();
        let kinds: Vec<&str> = ex
            .events()
            .iter()
            .map(|e| match e.event {
                ExportEvent::DrainIssued { .. } => "drain",
                ExportEvent::TransferDone { .. } => "transfer",
                ExportEvent::BufferReturned { .. } => "returned",
                ExportEvent::StagingBlocked => "blocked",
                _ => "other",
            })
            .filter(|k| *k != "other")
            .collect();
        assert_eq!(
            kinds,
            ["drain", "transfer", "blocked", "returned", "drain", "transfer", "returned"]
        );
        let stats = ex.pool_stats();
        assert_eq!(stats.checkouts, stats.returns);
        assert_eq!(stats.peak_in_use, 1);
    }

    #[test]
    fn payload_survives_the_staging_hop() {
        let cfg = DrainConfig {
            min_ready_entries: 1,
            ..lazy()
        };
        let (mut p, mut ex, sink) = setup(4096, cfg, 1e9);
        ex.push_meta([meta(3, 100)]);
        let r = p.reserve_payload(100).unwrap();
        let bytes: Vec<u8> = (0..100u8).map(|i| i.wrapping_mul(37)).collect();
        p.region_mut(&r).copy_from_slice(&bytes);
        p.publish(Descriptor::new(r.offset, r.len, 0, 3)).unwrap();
        ex.published(0.0);
        ex.finish();
        let got = &sink.lock().unwrap().records[0];
        assert_eq!(got.checksum(), crc32fast::hash(&bytes));
    }
}
