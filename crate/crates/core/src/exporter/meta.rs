use crate::capture::DType;
use crate::ring::Descriptor;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

use super::ExportError;

/// Parallelism coordinates of the rank that produced a record.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RankCoords {
    pub tp_rank: u32,
    pub pp_stage: u32,
}

/// Host-side metadata for one expected capture, queued before the step runs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorMeta {
    pub hook_id: u32,
    pub hook_name: String,
    pub layer: Option<u32>,
    pub step_seq: u32,
    pub rank: RankCoords,
    /// Kept requests, in batch order.
    pub request_ids: Vec<u64>,
    /// `[start, end)` token indices per kept request.
    pub token_ranges: Vec<(u32, u32)>,
    /// Per-request shape, batch dimension excluded.
    pub shape: Vec<usize>,
    pub dtype: DType,
}

impl TensorMeta {
    pub fn slice_bytes(&self) -> usize {
        self.shape.iter().product::<usize>() * self.dtype.width()
    }

    pub fn payload_bytes(&self) -> usize {
        self.slice_bytes() * self.request_ids.len()
    }

    fn matches(&self, d: &Descriptor) -> bool {
        self.step_seq == d.step_seq && self.hook_id == d.hook_id
    }
}

/// Metadata queue in expected hook-firing order.
#[derive(Debug, Default)]
pub struct TensorMetaFifo {
    queue: VecDeque<TensorMeta>,
}

impl TensorMetaFifo {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, meta: TensorMeta) {
        self.queue.push_back(meta);
    }

    pub fn extend<I: IntoIterator<Item = TensorMeta>>(&mut self, metas: I) {
        self.queue.extend(metas);
    }

    pub fn head(&self) -> Option<&TensorMeta> {
        self.queue.front()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }
}

/// One request's slice of one captured tensor, with its full context.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CaptureRecord {
    pub request_id: u64,
    pub hook: String,
    pub layer: Option<u32>,
    pub step: u32,
    pub rank: RankCoords,
    pub token_range: (u32, u32),
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub payload: Vec<u8>,
}

impl CaptureRecord {
    pub fn checksum(&self) -> u32 {
        crc32fast::hash(&self.payload)
    }

    /// Identity of the record within a run, independent of contents.
    pub fn key(&self) -> RecordKey {
        RecordKey {
            request_id: self.request_id,
            step: self.step,
            hook: self.hook.clone(),
            layer: self.layer,
            rank: self.rank,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordKey {
    pub request_id: u64,
    pub step: u32,
    pub hook: String,
    pub layer: Option<u32>,
    pub rank: RankCoords,
}

/// Pair a drained payload with the FIFO head and split it into per-request
/// records. The FIFO is only advanced on a match.
pub fn reconstruct(
    descriptor: &Descriptor,
    payload: &[u8],
    fifo: &mut TensorMetaFifo,
) -> Result<Vec<CaptureRecord>, ExportError> {
    let head = fifo.head().ok_or(ExportError::MetaMismatch {
        step_seq: descriptor.step_seq,
        hook_id: descriptor.hook_id,
        detail: "metadata queue is empty".into(),
    })?;
    if !head.matches(descriptor) {
        return Err(ExportError::MetaMismatch {
            step_seq: descriptor.step_seq,
            hook_id: descriptor.hook_id,
            detail: format!(
                "queue head is step {} hook {}",
                head.step_seq, head.hook_id
            ),
        });
    }
    if head.payload_bytes() != payload.len() {
        return Err(ExportError::MetaMismatch {
            step_seq: descriptor.step_seq,
            hook_id: descriptor.hook_id,
            detail: format!(
                "payload is {} bytes, metadata expects {}",
                payload.len(),
                head.payload_bytes()
            ),
        });
    }
    let meta = fifo.queue.pop_front().expect("head checked above");
    Ok(split_records(&meta, payload))
}

/// Split a gather-compacted payload along the batch dimension.
pub fn split_records(meta: &TensorMeta, payload: &[u8]) -> Vec<CaptureRecord> {
    let slice = meta.slice_bytes();
    meta.request_ids
        .iter()
        .zip(&meta.token_ranges)
        .enumerate()
        .map(|(i, (&request_id, &token_range))| CaptureRecord {
            request_id,
            hook: meta.hook_name.clone(),
            layer: meta.layer,
            step: meta.step_seq,
            rank: meta.rank,
            token_range,
            shape: meta.shape.clone(),
            dtype: meta.dtype,
            payload: payload[i * slice..(i + 1) * slice].to_vec(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(step: u32, hook: u32, reqs: &[u64], slice: usize) -> TensorMeta {
        TensorMeta {
            hook_id: hook,
            hook_name: format!("h{hook}"),
            layer: Some(hook),
            step_seq: step,
            rank: RankCoords::default(),
            request_ids: reqs.to_vec(),
            token_ranges: reqs.iter().map(|_| (4, 5)).collect(),
            shape: vec![slice],
            dtype: DType::U8,
        }
    }

    fn reference_slices(payload: &[u8], n: usize) -> Vec<Vec<u8>> {
        let s = payload.len() / n;
        (0..n).map(|i| payload[i * s..i * s + s].to_vec()).collect()
    }

    #[test]
    fn three_requests_split_in_order() {
        let mut fifo = TensorMetaFifo::new();
        fifo.push(meta(2, 1, &[10, 11, 12], 16));
        let payload: Vec<u8> = (0..48).collect();
        let d = Descriptor::new(0, 48, 1, 2);
        let recs = reconstruct(&d, &payload, &mut fifo).unwrap();
        assert_eq!(recs.iter().map(|r| r.request_id).collect::<Vec<_>>(), [10, 11, 12]);
        let want = reference_slices(&payload, 3);
        for (r, w) in recs.iter().zip(want) {
            assert_eq!(r.payload, w);
            assert_eq!(r.payload.len(), r.shape.iter().product::<usize>() * r.dtype.width());
        }
        assert!(fifo.is_empty());
    }

    #[test]
    fn single_request_is_whole_payload() {
        let mut fifo = TensorMetaFifo::new();
        fifo.push(meta(0, 0, &[7], 20));
        let payload = vec![9u8; 20];
        let recs = reconstruct(&Descriptor::new(0, 20, 0, 0), &payload, &mut fifo).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].payload, payload);
    }

    #[test]
    fn reordered_queue_is_a_mismatch() {
        let mut fifo = TensorMetaFifo::new();
        fifo.push(meta(0, 1, &[1], 16));
        fifo.push(meta(0, 0, &[1], 16));
        let err = reconstruct(&Descriptor::new(0, 16, 0, 0), &[0; 16], &mut fifo).unwrap_err();
        assert!(matches!(err, ExportError::MetaMismatch { .. }));
        // nothing consumed on mismatch
        assert_eq!(fifo.len(), 2);
    }

    #[test]
    fn length_disagreement_is_a_mismatch() {
        let mut fifo = TensorMetaFifo::new();
        fifo.push(meta(0, 0, &[1, 2], 16));
        let err = reconstruct(&Descriptor::new(0, 16, 0, 0), &[0; 16], &mut fifo).unwrap_err();
        assert!(matches!(err, ExportError::MetaMismatch { .. }));
    }

    #[test]
    fn empty_queue_is_a_mismatch() {
        let mut fifo = TensorMetaFifo::new();
        assert!(reconstruct(&Descriptor::new(0, 16, 0, 0), &[0; 16], &mut fifo).is_err());
    }
}
