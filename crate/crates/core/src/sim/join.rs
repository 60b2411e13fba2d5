//! Reassembly of full tensors from per-rank records.

use super::tensor::{unshard, AxisSplit};
use super::topology::RankTopology;
use crate::capture::{DType, HookRegistry};
use crate::exporter::CaptureRecord;
use serde::Serialize;
use std::collections::BTreeMap;

/// A record with its rank coordinates joined away.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct JoinedRecord {
    pub request_id: u64,
    pub step: u32,
    pub hook: String,
    pub layer: Option<u32>,
    pub token_range: (u32, u32),
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub payload: Vec<u8>,
}

impl From<CaptureRecord> for JoinedRecord {
    fn from(r: CaptureRecord) -> Self {
        Self {
            request_id: r.request_id,
            step: r.step,
            hook: r.hook,
            layer: r.layer,
            token_range: r.token_range,
            shape: r.shape,
            dtype: r.dtype,
            payload: r.payload,
        }
    }
}

type JoinKey = (u64, u32, String, Option<u32>);

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MissingShard {
    pub request_id: u64,
    pub step: u32,
    pub hook: String,
    pub layer: Option<u32>,
    /// Tensor-parallel ranks that did deliver a shard.
    pub present: Vec<u32>,
}

#[derive(Debug, Default)]
pub struct JoinReport {
    /// Joined records, sorted by (request, step, hook, layer).
    pub records: Vec<JoinedRecord>,
    pub missing: Vec<MissingShard>,
}

/// Join the records of all ranks. Hidden-sharded hooks are concatenated in
/// tensor-parallel rank order along their hidden axis; other hooks pass
/// through. Keys lacking a shard are reported and skipped.
pub fn join_records<'a, I>(datasets: I, topology: &RankTopology, registry: &HookRegistry) -> JoinReport
where
    I: IntoIterator<Item = &'a [CaptureRecord]>,
{
    let mut groups: BTreeMap<JoinKey, BTreeMap<u32, &CaptureRecord>> = BTreeMap::new();
    for set in datasets {
        for r in set {
            groups
                .entry((r.request_id, r.step, r.hook.clone(), r.layer))
                .or_default()
                .insert(r.rank.tp_rank, r);
        }
    }
    let tp = topology.tp_degree;
    let mut report = JoinReport::default();
    for ((request_id, step, hook, layer), shards) in groups {
        let axis = registry
            .id_of(&hook)
            .and_then(|id| registry.hooks()[id as usize].shape.shard_axis())
            .filter(|_| tp > 1);
        let first = *shards.values().next().expect("groups are non-empty");
        let Some(axis) = axis else {
            report.records.push(first.clone().into());
            continue;
        };
        if shards.len() != tp as usize || shards.keys().copied().ne(0..tp) {
            report.missing.push(MissingShard {
                request_id,
                step,
                hook,
                layer,
                present: shards.keys().copied().collect(),
            });
            continue;
        }
        let mut shape = first.shape.clone();
        shape[axis] *= tp as usize;
        let split = AxisSplit::new(&shape, axis, first.dtype.width());
        let parts: Vec<&[u8]> = shards.values().map(|r| r.payload.as_slice()).collect();
        report.records.push(JoinedRecord {
            request_id,
            step,
            hook,
            layer,
            token_range: first.token_range,
            payload: unshard(&parts, split),
            shape,
            dtype: first.dtype,
        });
    }
    report
}
