//! Per-step policy manager: decides which requests are observed and whether
//! the ring is flushed before the step runs.

use crate::capture::HookRegistry;
use crate::exporter::{RankCoords, TensorMeta};
use crate::ring::RingState;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("invalid policy config: {0}")]
    InvalidConfig(String),
}

/// Batch-aligned keep(1)/drop(0) flags, fixed for the duration of a step.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct KeepDropVector {
    flags: Vec<bool>,
}

impl KeepDropVector {
    pub fn all_ones(n: usize) -> Self {
        Self { flags: vec![true; n] }
    }

    pub fn all_zeros(n: usize) -> Self {
        Self { flags: vec![false; n] }
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        Self { flags }
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn kept_count(&self) -> usize {
        self.flags.iter().filter(|&&k| k).count()
    }

    pub fn is_all_ones(&self) -> bool {
        self.flags.iter().all(|&k| k)
    }

    pub fn kept_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.flags.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i)
    }

    pub fn dropped_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.flags.iter().enumerate().filter(|(_, &k)| !k).map(|(i, _)| i)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    #[default]
    Completeness,
    BestEffort,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    DropRecent,
    KeepByPattern,
}

/// Which requests keep-by-pattern protects.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    RequestIds(BTreeSet<u64>),
    PromptPrefix(String),
}

impl Predicate {
    pub fn matches(&self, request: &BatchRequest) -> bool {
        match self {
            Predicate::RequestIds(ids) => ids.contains(&request.id),
            Predicate::PromptPrefix(p) => request.prompt.starts_with(p.as_str()),
        }
    }
}

fn default_watermark() -> f64 {
    0.8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    #[serde(default)]
    pub mode: PolicyMode,
    #[serde(default)]
    pub strategy: Option<Strategy>,
    #[serde(default)]
    pub predicate: Option<Predicate>,
    #[serde(default = "default_watermark")]
    pub pressure_watermark: f64,
    /// Once dropped, a request stays dropped for the rest of the run.
    #[serde(default)]
    pub sticky_drops: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self::completeness()
    }
}

impl PolicyConfig {
    pub fn completeness() -> Self {
        Self {
            mode: PolicyMode::Completeness,
            strategy: None,
            predicate: None,
            pressure_watermark: default_watermark(),
            sticky_drops: false,
        }
    }

    pub fn drop_recent() -> Self {
        Self {
            mode: PolicyMode::BestEffort,
            strategy: Some(Strategy::DropRecent),
            ..Self::completeness()
        }
    }

    pub fn keep_by_pattern(predicate: Predicate) -> Self {
        Self {
            mode: PolicyMode::BestEffort,
            strategy: Some(Strategy::KeepByPattern),
            predicate: Some(predicate),
            ..Self::completeness()
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::InvalidConfig(m.into()));
        if !(self.pressure_watermark > 0.0 && self.pressure_watermark <= 1.0) {
            return bad("pressure_watermark must be in (0, 1]");
        }
        match (self.mode, self.strategy) {
            (PolicyMode::Completeness, Some(_)) => return bad("strategy applies only to best_effort"),
            (PolicyMode::BestEffort, None) => return bad("best_effort needs a strategy"),
            _ => {}
        }
        let wants_predicate = self.strategy == Some(Strategy::KeepByPattern);
        if wants_predicate != self.predicate.is_some() {
            return bad("predicate is required for keep_by_pattern and only there");
        }
        Ok(())
    }
}

/// One request in the step's batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchRequest {
    pub id: u64,
    /// Admission order; lower arrived earlier.
    pub arrival: u64,
    pub prompt: String,
    /// `[start, end)` token positions processed this step.
    pub token_range: (u32, u32),
}

impl BatchRequest {
    pub fn tokens(&self) -> usize {
        (self.token_range.1 - self.token_range.0) as usize
    }
}

/// Rank-local facts the plan depends on besides the batch.
#[derive(Clone, Debug, Default)]
pub struct StepContext {
    pub step_seq: u32,
    pub rank: RankCoords,
    /// Local width of `Hidden` axes (the shard width under tensor parallelism).
    pub hidden: usize,
    /// Hooks that fire on this rank, indexed by hook id. `None` means all.
    pub fires_here: Option<Vec<bool>>,
}

impl StepContext {
    fn fires(&self, hook_id: u32) -> bool {
        self.fires_here
            .as_ref()
            .is_none_or(|m| m.get(hook_id as usize).copied().unwrap_or(false))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepPlan {
    pub keep: KeepDropVector,
    pub flush_before: bool,
    /// Metadata for every capture this step will publish, in firing order.
    pub fifo_entries: Vec<TensorMeta>,
    /// Dropped request ids, in batch order.
    pub dropped: Vec<u64>,
}

impl StepPlan {
    /// Ring payload length of each capture, in firing order.
    pub fn capture_lens(&self) -> impl Iterator<Item = u64> + '_ {
        self.fifo_entries.iter().map(|m| m.payload_bytes() as u64)
    }
}

/// Bytes each request contributes to the step across all enabled hooks that
/// fire on this rank.
pub fn estimate_step_bytes(
    registry: &HookRegistry,
    batch: &[BatchRequest],
    ctx: &StepContext,
) -> Vec<u64> {
    batch
        .iter()
        .map(|r| {
            firing_hooks(registry, ctx)
                .map(|id| registry.hooks()[id as usize].slice_bytes(r.tokens(), ctx.hidden))
                .sum()
        })
        .collect()
}

fn firing_hooks<'a>(
    registry: &'a HookRegistry,
    ctx: &'a StepContext,
) -> impl Iterator<Item = u32> + 'a {
    registry.enabled_ids().filter(|&id| ctx.fires(id))
}

/// Policy state carried across steps.
#[derive(Clone, Debug, Default)]
pub struct PolicyState {
    dropped_ever: BTreeSet<u64>,
}

impl PolicyState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ever_dropped(&self) -> &BTreeSet<u64> {
        &self.dropped_ever
    }

    /// Plan a step and remember its drops.
    pub fn prepare(
        &mut self,
        policy: &PolicyConfig,
        batch: &[BatchRequest],
        ring: &RingState,
        registry: &HookRegistry,
        ctx: &StepContext,
    ) -> StepPlan {
        let excluded = if policy.sticky_drops {
            Some(&self.dropped_ever)
        } else {
            None
        };
        let plan = plan_step(policy, batch, ring, registry, ctx, excluded);
        self.dropped_ever.extend(plan.dropped.iter().copied());
        plan
    }
}

/// Plan one step from scratch. Deterministic in its inputs.
pub fn prepare_step(
    policy: &PolicyConfig,
    batch: &[BatchRequest],
    ring: &RingState,
    registry: &HookRegistry,
    ctx: &StepContext,
) -> StepPlan {
    plan_step(policy, batch, ring, registry, ctx, None)
}

fn plan_step(
    policy: &PolicyConfig,
    batch: &[BatchRequest],
    ring: &RingState,
    registry: &HookRegistry,
    ctx: &StepContext,
    excluded: Option<&BTreeSet<u64>>,
) -> StepPlan {
    debug_assert!(
        batch.windows(2).all(|w| w[0].tokens() == w[1].tokens()),
        "a step processes the same token count for every request"
    );
    let (keep, flush_before) = match policy.mode {
        PolicyMode::Completeness => (
            KeepDropVector::all_ones(batch.len()),
            ring.pressure() >= policy.pressure_watermark,
        ),
        PolicyMode::BestEffort => {
            let order = priority_order(policy, batch, excluded);
            let k = largest_fitting_prefix(&order, batch, ring, registry, ctx);
            let mut flags = vec![false; batch.len()];
            for &i in &order[..k] {
                flags[i] = true;
            }
            (KeepDropVector::from_flags(flags), false)
        }
    };
    let fifo_entries = fifo_for(&keep, batch, registry, ctx);
    let dropped = keep.dropped_indices().map(|i| batch[i].id).collect();
    StepPlan {
        keep,
        flush_before,
        fifo_entries,
        dropped,
    }
}

/// Batch indices from most to least worth keeping. Excluded requests are
/// left out entirely.
fn priority_order(
    policy: &PolicyConfig,
    batch: &[BatchRequest],
    excluded: Option<&BTreeSet<u64>>,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..batch.len())
        .filter(|&i| excluded.is_none_or(|e| !e.contains(&batch[i].id)))
        .collect();
    let by_arrival = |&i: &usize| (batch[i].arrival, i);
    match (policy.strategy, &policy.predicate) {
        (Some(Strategy::KeepByPattern), Some(pred)) => {
            order.sort_by_key(|&i| (!pred.matches(&batch[i]), by_arrival(&i)));
        }
        _ => order.sort_by_key(by_arrival),
    }
    order
}

fn largest_fitting_prefix(
    order: &[usize],
    batch: &[BatchRequest],
    ring: &RingState,
    registry: &HookRegistry,
    ctx: &StepContext,
) -> usize {
    let hooks: Vec<u32> = firing_hooks(registry, ctx).collect();
    let fits = |k: usize| {
        let lens = hooks.iter().map(|&id| {
            let spec = &registry.hooks()[id as usize];
            order[..k]
                .iter()
                .map(|&i| spec.slice_bytes(batch[i].tokens(), ctx.hidden))
                .sum::<u64>()
        });
        ring.fits_sequence(lens)
    };
    // demand grows with k, so the feasible prefixes are an initial range
    let (mut lo, mut hi) = (0, order.len());
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    lo
}

fn fifo_for(
    keep: &KeepDropVector,
    batch: &[BatchRequest],
    registry: &HookRegistry,
    ctx: &StepContext,
) -> Vec<TensorMeta> {
    if keep.kept_count() == 0 {
        return Vec::new();
    }
    let tokens = batch[0].tokens();
    let request_ids: Vec<u64> = keep.kept_indices().map(|i| batch[i].id).collect();
    let token_ranges: Vec<(u32, u32)> = keep.kept_indices().map(|i| batch[i].token_range).collect();
    firing_hooks(registry, ctx)
        .map(|id| {
            let spec = &registry.hooks()[id as usize];
            TensorMeta {
                hook_id: id,
                hook_name: spec.name.clone(),
                layer: spec.layer_index(),
                step_seq: ctx.step_seq,
                rank: ctx.rank,
                request_ids: request_ids.clone(),
                token_ranges: token_ranges.clone(),
                shape: spec.shape.resolve(tokens, ctx.hidden),
                dtype: spec.dtype,
            }
        })
        .filter(|m| m.payload_bytes() > 0)
        .collect()
}
