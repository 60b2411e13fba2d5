//! Threaded export pipeline for wall-clock runs.
//!
//! ```text
//!  ring ──► drain ──(staged, bounded)──► stage ──(pageable, bounded)──► sink
//!             ▲                            │
//!             └──── free staging buffers ◄─┘
//! ```
//!
//! Each stage is one thread. Staging buffers circulate through a channel that
//! starts full, so a drain blocks until the stage worker hands a buffer back.
//! A blocked enqueue anywhere stalls the stage behind it, and ultimately the
//! drain, which leaves the ring to fill and push back on the producer.

use super::drain::{
    complete_transfer, evaluate_trigger, fill_staging, ready_summary, select_batch,
    stage_to_pageable, staging_buffers, PageableBatch, StagedBatch, StagingBuffer,
};
use super::meta::{reconstruct, TensorMeta, TensorMetaFifo};
use super::sink::{Sink, SinkStage, SinkStats};
use super::{DrainConfig, ExportError, ExportEvent, TimedEvent};
use crate::capture::DeviceCopyEngine;
use crate::ring::RingConsumer;
use crossbeam_channel::{bounded, select, unbounded, Receiver, Sender};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

#[derive(Clone, Copy, Debug)]
pub struct PipelineOptions {
    /// Capacity of each inter-stage queue, in batches.
    pub queue_capacity: usize,
    /// Sleep for the modeled transfer time of each batch.
    pub emulate_transfer_time: bool,
    pub poll_interval: Duration,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            queue_capacity: 2,
            emulate_transfer_time: true,
            poll_interval: Duration::from_micros(50),
        }
    }
}

#[derive(Debug)]
pub struct PipelineReport {
    pub sink: SinkStats,
    pub events: Vec<TimedEvent>,
    pub drained_batches: u64,
    pub peak_transient_bytes: u64,
    pub transient_bound: u64,
    pub error: Option<ExportError>,
}

struct EventLog {
    start: Instant,
    events: Mutex<Vec<TimedEvent>>,
}

impl EventLog {
    fn push(&self, event: ExportEvent) {
        let at = self.start.elapsed();
        self.events.lock().unwrap().push(TimedEvent { at, event });
    }
}

#[derive(Default)]
struct Transient {
    current: AtomicU64,
    peak: AtomicU64,
}

impl Transient {
    fn add(&self, bytes: u64) {
        let now = self.current.fetch_add(bytes, Ordering::AcqRel) + bytes;
        self.peak.fetch_max(now, Ordering::AcqRel);
    }

    fn sub(&self, bytes: u64) {
        self.current.fetch_sub(bytes, Ordering::AcqRel);
    }
}

/// Handle to a running pipeline.
pub struct Exporter {
    fifo: Arc<Mutex<TensorMetaFifo>>,
    flush_tx: Sender<Sender<()>>,
    stop: Arc<AtomicBool>,
    log: Arc<EventLog>,
    transient: Arc<Transient>,
    transient_bound: u64,
    drain: JoinHandle<Result<u64, ExportError>>,
    stage: JoinHandle<()>,
    deliver: JoinHandle<(SinkStage, Option<ExportError>)>,
}

impl Exporter {
    pub fn spawn(
        consumer: RingConsumer,
        config: DrainConfig,
        engine: DeviceCopyEngine,
        sink: Box<dyn Sink>,
        options: PipelineOptions,
    ) -> Result<Self, ExportError> {
        config.validate()?;
        let queue_capacity = options.queue_capacity.max(1);
        let fifo = Arc::new(Mutex::new(TensorMetaFifo::new()));
        let stop = Arc::new(AtomicBool::new(false));
        let log = Arc::new(EventLog {
            start: Instant::now(),
            events: Mutex::new(Vec::new()),
        });
        let transient = Arc::new(Transient::default());
        let transient_bound = config.staging_buffer_size
            * (config.staging_buffer_count + queue_capacity) as u64;

        let (free_tx, free_rx) = bounded::<StagingBuffer>(config.staging_buffer_count);
        for b in staging_buffers(&config) {
            free_tx.send(b).expect("pool channel sized to the pool");
        }
        let (staged_tx, staged_rx) = bounded::<StagedBatch>(queue_capacity);
        let (page_tx, page_rx) = bounded::<PageableBatch>(queue_capacity);
        let (flush_tx, flush_rx) = unbounded::<Sender<()>>();

        let drain = {
            let worker = DrainWorker {
                consumer,
                config,
                engine,
                options,
                free_rx,
                staged_tx,
                flush_rx,
                stop: stop.clone(),
                log: log.clone(),
                transient: transient.clone(),
            };
            thread::Builder::new()
                .name("export-drain".into())
                .spawn(move || worker.run())
                .expect("spawn drain worker")
        };
        let stage = {
            let log = log.clone();
            thread::Builder::new()
                .name("export-stage".into())
                .spawn(move || {
                    for batch in staged_rx {
                        let (pageable, buffer) = stage_to_pageable(batch);
                        let id = buffer.id();
                        // after the drain exits nobody takes buffers back
                        if free_tx.send(buffer).is_ok() {
                            log.push(ExportEvent::BufferReturned { buffer: id });
                        }
                        if page_tx.send(pageable).is_err() {
                            return;
                        }
                    }
                })
                .expect("spawn stage worker")
        };
        let deliver = {
            let fifo = fifo.clone();
            let log = log.clone();
            let transient = transient.clone();
            let stop = stop.clone();
            thread::Builder::new()
                .name("export-sink".into())
                .spawn(move || {
                    let mut stage = SinkStage::new(sink);
                    for batch in page_rx {
                        for (desc, payload) in &batch.entries {
                            let records = {
                                let mut fifo = fifo.lock().unwrap();
                                reconstruct(desc, payload, &mut fifo)
                            };
                            match records {
                                Ok(records) => {
                                    let before = stage.stats().failures;
                                    stage.sink_write(&records);
                                    if stage.stats().failures > before {
                                        log.push(ExportEvent::SinkFailure);
                                    }
                                    log.push(ExportEvent::Delivered {
                                        records: records.len(),
                                    });
                                }
                                Err(e) => {
                                    stop.store(true, Ordering::Release);
                                    stage.finish();
                                    return (stage, Some(e));
                                }
                            }
                        }
                        transient.sub(batch.bytes);
                    }
                    stage.finish();
                    (stage, None)
                })
                .expect("spawn sink worker")
        };

        Ok(Self {
            fifo,
            flush_tx,
            stop,
            log,
            transient,
            transient_bound,
            drain,
            stage,
            deliver,
        })
    }

    /// Queue metadata for captures about to be issued.
    pub fn push_meta<I: IntoIterator<Item = TensorMeta>>(&self, metas: I) {
        self.fifo.lock().unwrap().extend(metas);
    }

    /// Drain every ready entry regardless of thresholds and return once the
    /// payload ring is empty.
    pub fn flush(&self) -> Result<(), ExportError> {
        let (ack_tx, ack_rx) = bounded(1);
        self.flush_tx
            .send(ack_tx)
            .map_err(|_| ExportError::Stopped)?;
        ack_rx.recv().map_err(|_| ExportError::Stopped)
    }

    /// Drain what is left, stop all workers and collect their results.
    pub fn finish(self) -> PipelineReport {
        self.stop.store(true, Ordering::Release);
        let drained = self.drain.join().expect("drain worker panicked");
        self.stage.join().expect("stage worker panicked");
        let (stage, deliver_err) = self.deliver.join().expect("sink worker panicked");
        let (drained_batches, drain_err) = match drained {
            Ok(n) => (n, None),
            Err(e) => (0, Some(e)),
        };
        let events = std::mem::take(&mut *self.log.events.lock().unwrap());
        PipelineReport {
            sink: stage.stats(),
            events,
            drained_batches,
            peak_transient_bytes: self.transient.peak.load(Ordering::Acquire),
            transient_bound: self.transient_bound,
            error: deliver_err.or(drain_err),
        }
    }
}

struct DrainWorker {
    consumer: RingConsumer,
    config: DrainConfig,
    engine: DeviceCopyEngine,
    options: PipelineOptions,
    free_rx: Receiver<StagingBuffer>,
    staged_tx: Sender<StagedBatch>,
    flush_rx: Receiver<Sender<()>>,
    stop: Arc<AtomicBool>,
    log: Arc<EventLog>,
    transient: Arc<Transient>,
}

impl DrainWorker {
    fn run(mut self) -> Result<u64, ExportError> {
        let mut batches = 0;
        let mut ready_since: Option<Instant> = None;
        let mut waiting_flushes: Vec<Sender<()>> = Vec::new();
        loop {
            while let Ok(ack) = self.flush_rx.try_recv() {
                waiting_flushes.push(ack);
            }
            let stopping = self.stop.load(Ordering::Acquire);
            let (entries, bytes) = ready_summary(&self.consumer);
            if entries == 0 {
                ready_since = None;
                if self.consumer.state().occupancy == 0 {
                    for ack in waiting_flushes.drain(..) {
                        let _ = ack.send(());
                    }
                    if stopping {
                        return Ok(batches);
                    }
                }
                waiting_flushes.extend(self.idle());
                continue;
            }
            let since = *ready_since.get_or_insert_with(Instant::now);
            let forced = stopping || !waiting_flushes.is_empty();
            let Some(reason) =
                evaluate_trigger(&self.config, entries, bytes, Some(since.elapsed()), forced)
            else {
                waiting_flushes.extend(self.idle());
                continue;
            };
            let count = select_batch(&self.consumer, &self.config)?;
            let buffer = match self.free_rx.try_recv() {
                Ok(b) => b,
                Err(_) => {
                    self.log.push(ExportEvent::StagingBlocked);
                    match self.free_rx.recv() {
                        Ok(b) => b,
                        Err(_) => return Err(ExportError::Stopped),
                    }
                }
            };
            let batch = fill_staging(&mut self.consumer, buffer, count, &self.engine, reason);
            self.log.push(ExportEvent::DrainIssued {
                reason,
                entries: batch.entries.len(),
                bytes: batch.bytes,
                buffer: batch.buffer.id(),
            });
            self.transient.add(batch.bytes);
            if self.options.emulate_transfer_time {
                thread::sleep(batch.transfer_time);
            }
            complete_transfer(&mut self.consumer, &batch)?;
            self.log.push(ExportEvent::TransferDone {
                buffer: batch.buffer.id(),
                bytes: batch.bytes,
            });
            batches += 1;
            ready_since = None;
            if self.staged_tx.send(batch).is_err() {
                return Err(ExportError::Stopped);
            }
        }
    }

    /// Wait one poll interval, returning early with a flush request.
    fn idle(&self) -> Option<Sender<()>> {
        select! {
            recv(self.flush_rx) -> ack => ack.ok(),
            default(self.options.poll_interval) => None,
        }
    }
}
