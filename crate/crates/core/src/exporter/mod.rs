//! Host-side export path: drain, staging, pageable copy, metadata matching and
//! delivery to a sink.

pub mod drain;
pub mod meta;
pub mod pipeline;
pub mod sink;

pub use drain::{
    complete_transfer, drain_once, evaluate_trigger, ready_summary, select_batch,
    stage_to_pageable, DrainConfig, PageableBatch, PoolStats, StagedBatch, StagingPool,
    TriggerReason,
};
pub use meta::{reconstruct, CaptureRecord, RankCoords, RecordKey, TensorMeta, TensorMetaFifo};
pub use pipeline::{Exporter, PipelineOptions, PipelineReport};
pub use sink::{
    read_ndjson_dataset, Dataset, MemorySink, NdjsonSink, NullSink, Sink, SinkStage, SinkStats,
    StreamSink,
};

use crate::ring::RingError;
use serde::Serialize;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExportError {
    #[error("metadata mismatch at step {step_seq} hook {hook_id}: {detail}")]
    MetaMismatch {
        step_seq: u32,
        hook_id: u32,
        detail: String,
    },
    #[error("no staging buffer available")]
    StagingExhausted,
    #[error("ring entry of {len} bytes exceeds the {size}-byte staging buffer")]
    EntryExceedsStaging { len: u64, size: u64 },
    #[error("invalid drain config: {0}")]
    InvalidConfig(String),
    #[error("export pipeline stopped")]
    Stopped,
    #[error(transparent)]
    Ring(#[from] RingError),
}

/// One entry of an exporter event log.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ExportEvent {
    DrainIssued {
        reason: TriggerReason,
        entries: usize,
        bytes: u64,
        buffer: u32,
    },
    StagingBlocked,
    TransferDone {
        buffer: u32,
        bytes: u64,
    },
    BufferReturned {
        buffer: u32,
    },
    Delivered {
        records: usize,
    },
    SinkFailure,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimedEvent {
    #[serde(with = "drain::secs_f64")]
    pub at: Duration,
    #[serde(flatten)]
    pub event: ExportEvent,
}
