//! Drain-side building blocks: threshold evaluation, the staging buffer pool,
//! the batched ring-to-staging transfer and the staging-to-pageable hop.
//!
//! These are shared by the threaded pipeline and the virtual-time simulator;
//! neither the clock nor the threading model lives here.

use crate::capture::DeviceCopyEngine;
use crate::ring::{Descriptor, RingConsumer};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::ops::Range;
use std::time::Duration;

use super::ExportError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DrainConfig {
    pub min_ready_entries: usize,
    pub min_ready_bytes: u64,
    #[serde(with = "secs_f64")]
    pub max_wait: Duration,
    pub staging_buffer_size: u64,
    pub staging_buffer_count: usize,
}

impl Default for DrainConfig {
    fn default() -> Self {
        Self {
            min_ready_entries: 8,
            min_ready_bytes: 1 << 20,
            max_wait: Duration::from_millis(2),
            staging_buffer_size: 8 << 20,
            staging_buffer_count: 4,
        }
    }
}

impl DrainConfig {
    pub fn validate(&self) -> Result<(), ExportError> {
        if self.min_ready_entries == 0
            || self.min_ready_bytes == 0
            || self.max_wait.is_zero()
            || self.staging_buffer_size == 0
            || self.staging_buffer_count == 0
        {
            return Err(ExportError::InvalidConfig(
                "drain thresholds and staging sizes must all be > 0".into(),
            ));
        }
        Ok(())
    }
}

pub(crate) mod secs_f64 {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

/// Why a drain fired.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerReason {
    Flush,
    Entries,
    Bytes,
    Timeout,
}

impl fmt::Display for TriggerReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TriggerReason::Flush => "flush",
            TriggerReason::Entries => "entries",
            TriggerReason::Bytes => "bytes",
            TriggerReason::Timeout => "timeout",
        })
    }
}

/// A drain fires when ANY threshold is met, or on an explicit flush. With
/// nothing ready it never fires.
pub fn evaluate_trigger(
    config: &DrainConfig,
    ready_entries: usize,
    ready_bytes: u64,
    oldest_wait: Option<Duration>,
    flush: bool,
) -> Option<TriggerReason> {
    if ready_entries == 0 {
        return None;
    }
    if flush {
        Some(TriggerReason::Flush)
    } else if ready_entries >= config.min_ready_entries {
        Some(TriggerReason::Entries)
    } else if ready_bytes >= config.min_ready_bytes {
        Some(TriggerReason::Bytes)
    } else if oldest_wait.is_some_and(|w| w >= config.max_wait) {
        Some(TriggerReason::Timeout)
    } else {
        None
    }
}

/// A pinned-memory analog buffer.
pub struct StagingBuffer {
    id: u32,
    data: Vec<u8>,
}

impl StagingBuffer {
    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn capacity(&self) -> usize {
        self.data.capacity()
    }
}

impl fmt::Debug for StagingBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StagingBuffer")
            .field("id", &self.id)
            .field("len", &self.data.len())
            .finish()
    }
}

pub fn staging_buffers(config: &DrainConfig) -> Vec<StagingBuffer> {
    (0..config.staging_buffer_count)
        .map(|id| StagingBuffer {
            id: id as u32,
            data: Vec::with_capacity(config.staging_buffer_size as usize),
        })
        .collect()
}

/// Fixed set of staging buffers with checkout accounting.
#[derive(Debug)]
pub struct StagingPool {
    free: Vec<StagingBuffer>,
    count: usize,
    checkouts: u64,
    returns: u64,
    peak_in_use: usize,
}

impl StagingPool {
    pub fn new(config: &DrainConfig) -> Self {
        let mut free = staging_buffers(config);
        free.reverse();
        Self {
            free,
            count: config.staging_buffer_count,
            checkouts: 0,
            returns: 0,
            peak_in_use: 0,
        }
    }

    pub fn checkout(&mut self) -> Option<StagingBuffer> {
        let buf = self.free.pop()?;
        self.checkouts += 1;
        self.peak_in_use = self.peak_in_use.max(self.in_use());
        Some(buf)
    }

    pub fn give_back(&mut self, mut buf: StagingBuffer) {
        buf.data.clear();
        self.free.push(buf);
        self.returns += 1;
        assert!(self.free.len() <= self.count, "staging buffer returned twice");
    }

    pub fn in_use(&self) -> usize {
        self.count - self.free.len()
    }

    pub fn available(&self) -> usize {
        self.free.len()
    }

    pub fn stats(&self) -> PoolStats {
        PoolStats {
            count: self.count,
            checkouts: self.checkouts,
            returns: self.returns,
            peak_in_use: self.peak_in_use,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize)]
pub struct PoolStats {
    pub count: usize,
    pub checkouts: u64,
    pub returns: u64,
    pub peak_in_use: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StagedEntry {
    pub descriptor: Descriptor,
    pub range: Range<usize>,
}

/// Payloads copied from the ring into one staging buffer by a single batched
/// transfer. The ring regions stay reserved until
/// [`complete_transfer`] releases them.
#[derive(Debug)]
pub struct StagedBatch {
    pub buffer: StagingBuffer,
    pub entries: Vec<StagedEntry>,
    pub bytes: u64,
    pub transfer_time: Duration,
    pub reason: TriggerReason,
}

/// Payloads in pageable memory, one owned buffer per descriptor.
#[derive(Debug, Default)]
pub struct PageableBatch {
    pub entries: Vec<(Descriptor, Vec<u8>)>,
    pub bytes: u64,
}

/// Ready entries and bytes visible at the meta ring tail.
pub fn ready_summary(consumer: &RingConsumer) -> (usize, u64) {
    let ready = consumer.peek_ready(consumer.config().meta_slots as usize);
    (ready.len(), ready.iter().map(|d| d.payload_len).sum())
}

/// Number of leading ready entries that fit one staging buffer.
pub fn select_batch(consumer: &RingConsumer, config: &DrainConfig) -> Result<usize, ExportError> {
    let ready = consumer.peek_ready(consumer.config().meta_slots as usize);
    let mut total = 0;
    for (i, d) in ready.iter().enumerate() {
        if d.payload_len > config.staging_buffer_size {
            if i == 0 {
                return Err(ExportError::EntryExceedsStaging {
                    len: d.payload_len,
                    size: config.staging_buffer_size,
                });
            }
            return Ok(i);
        }
        total += d.payload_len;
        if total > config.staging_buffer_size {
            return Ok(i);
        }
    }
    Ok(ready.len())
}

/// Consume `count` ready descriptors and copy their payloads into `buffer`.
pub fn fill_staging(
    consumer: &mut RingConsumer,
    mut buffer: StagingBuffer,
    count: usize,
    engine: &DeviceCopyEngine,
    reason: TriggerReason,
) -> StagedBatch {
    let descriptors = consumer.poll_ready(count);
    buffer.data.clear();
    let mut entries = Vec::with_capacity(descriptors.len());
    for d in descriptors {
        let start = buffer.data.len();
        buffer.data.extend_from_slice(consumer.payload(&d));
        entries.push(StagedEntry {
            descriptor: d,
            range: start..buffer.data.len(),
        });
    }
    let bytes = buffer.data.len() as u64;
    StagedBatch {
        buffer,
        entries,
        bytes,
        transfer_time: engine.d2h_time(bytes),
        reason,
    }
}

/// One drain: pick the ready prefix that fits a staging buffer, check a
/// buffer out and stage the batch. `Ok(None)` when nothing is ready.
pub fn drain_once(
    consumer: &mut RingConsumer,
    config: &DrainConfig,
    engine: &DeviceCopyEngine,
    pool: &mut StagingPool,
    reason: TriggerReason,
) -> Result<Option<StagedBatch>, ExportError> {
    let count = select_batch(consumer, config)?;
    if count == 0 {
        return Ok(None);
    }
    let buffer = pool.checkout().ok_or(ExportError::StagingExhausted)?;
    Ok(Some(fill_staging(consumer, buffer, count, engine, reason)))
}

/// Release the ring regions of a batch whose transfer has completed.
pub fn complete_transfer(consumer: &mut RingConsumer, batch: &StagedBatch) -> Result<(), ExportError> {
    for e in &batch.entries {
        consumer.release_payload(e.descriptor.payload_offset, e.descriptor.payload_len)?;
    }
    Ok(())
}

/// Copy a staged batch into pageable memory and hand the staging buffer back
/// for reuse.
pub fn stage_to_pageable(batch: StagedBatch) -> (PageableBatch, StagingBuffer) {
    let StagedBatch {
        buffer,
        entries,
        bytes,
        ..
    } = batch;
    let entries = entries
        .into_iter()
        .map(|e| (e.descriptor, buffer.data[e.range].to_vec()))
        .collect();
    (PageableBatch { entries, bytes }, buffer)
}
