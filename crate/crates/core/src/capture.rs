//! Capture points: declared hook sites, the per-step hook filter, and the
//! gather-compact copy of kept batch slices into the payload ring.

use crate::policy::KeepDropVector;
use crate::ring::{Descriptor, RingError, RingProducer};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CaptureError {
    #[error("duplicate hook name {0:?}")]
    DuplicateHook(String),
    #[error("unknown hook {0:?}")]
    UnknownHook(String),
    #[error("hook id {0} out of range")]
    UnknownHookId(u32),
    #[error("keep vector has {keep} entries for a batch of {batch}")]
    KeepLengthMismatch { keep: usize, batch: usize },
    #[error("tensor of {actual} bytes does not match shape {shape:?} x {width}")]
    ViewSize {
        actual: usize,
        shape: Vec<usize>,
        width: usize,
    },
    #[error("tensor view needs a batch dimension")]
    MissingBatchDim,
    #[error("best-effort plan underestimated ring demand: {0}")]
    PolicyUnderestimate(RingError),
    #[error("stalled capture cannot make progress: the drain has nothing left to free")]
    NoProgress,
    #[error(transparent)]
    Ring(#[from] RingError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    I8,
    F16,
    Bf16,
    I32,
    F32,
    I64,
    F64,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::U8 | DType::I8 => 1,
            DType::F16 | DType::Bf16 => 2,
            DType::I32 | DType::F32 => 4,
            DType::I64 | DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::U8 => "u8",
            DType::I8 => "i8",
            DType::F16 => "f16",
            DType::Bf16 => "bf16",
            DType::I32 => "i32",
            DType::F32 => "f32",
            DType::I64 => "i64",
            DType::F64 => "f64",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "u8" => DType::U8,
            "i8" => DType::I8,
            "f16" => DType::F16,
            "bf16" => DType::Bf16,
            "i32" => DType::I32,
            "f32" => DType::F32,
            "i64" => DType::I64,
            "f64" => DType::F64,
            _ => return None,
        })
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One axis of a per-request tensor shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dim {
    /// Tokens processed for the request in this step.
    Tokens,
    /// The model hidden width (the shard width under tensor parallelism).
    Hidden,
    Fixed(usize),
}

/// Per-request shape of a hook's tensor, batch dimension excluded.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShapeTemplate(pub Vec<Dim>);

impl ShapeTemplate {
    pub fn hidden_state() -> Self {
        Self(vec![Dim::Tokens, Dim::Hidden])
    }

    pub fn resolve(&self, tokens: usize, hidden: usize) -> Vec<usize> {
        self.0
            .iter()
            .map(|d| match *d {
                Dim::Tokens => tokens,
                Dim::Hidden => hidden,
                Dim::Fixed(n) => n,
            })
            .collect()
    }

    pub fn elements(&self, tokens: usize, hidden: usize) -> usize {
        self.resolve(tokens, hidden).iter().product()
    }

    pub fn is_token_major(&self) -> bool {
        self.0.contains(&Dim::Tokens)
    }

    /// Position of the axis split across tensor-parallel ranks, if any.
    pub fn shard_axis(&self) -> Option<usize> {
        self.0.iter().position(|d| *d == Dim::Hidden)
    }
}

/// Where a hook sits in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HookSite {
    /// Before the first layer.
    Input,
    Layer(u32),
    /// After the last layer.
    Output,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HookSpec {
    pub name: String,
    pub site: HookSite,
    pub shape: ShapeTemplate,
    pub dtype: DType,
}

impl HookSpec {
    pub fn layer_index(&self) -> Option<u32> {
        match self.site {
            HookSite::Layer(l) => Some(l),
            _ => None,
        }
    }

    /// Bytes of one request's slice.
    pub fn slice_bytes(&self, tokens: usize, hidden: usize) -> u64 {
        (self.shape.elements(tokens, hidden) * self.dtype.width()) as u64
    }
}

/// How a declared hook expands over the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookScope {
    /// One instance per layer, named `layers.{i}.{name}`.
    PerLayer,
    Input,
    Output,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HookDecl {
    pub name: String,
    pub scope: HookScope,
    pub shape: ShapeTemplate,
    pub dtype: DType,
}

impl HookDecl {
    pub fn per_layer(name: &str, shape: ShapeTemplate, dtype: DType) -> Self {
        Self {
            name: name.into(),
            scope: HookScope::PerLayer,
            shape,
            dtype,
        }
    }

    pub fn global(name: &str, scope: HookScope, shape: ShapeTemplate, dtype: DType) -> Self {
        Self {
            name: name.into(),
            scope,
            shape,
            dtype,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: u32,
    pub hidden: usize,
}

/// Declared hooks in graph order plus the enabled subset.
///
/// Filter changes are staged and applied by [`HookRegistry::begin_step`], so a
/// step always runs with one consistent hook set.
#[derive(Clone, Debug)]
pub struct HookRegistry {
    hooks: Vec<HookSpec>,
    by_name: HashMap<String, u32>,
    enabled: Vec<bool>,
    staged: Option<Vec<bool>>,
}

/// Expand declarations over the model's layers and register them, all enabled.
///
/// Ordering follows the graph: input hooks, then each layer's hooks in
/// declaration order, then output hooks.
pub fn install_hooks(model: &ModelSpec, decls: &[HookDecl]) -> Result<HookRegistry, CaptureError> {
    let mut hooks = Vec::new();
    hooks.extend(
        decls
            .iter()
            .filter(|d| d.scope == HookScope::Input)
            .map(|d| HookSpec {
                name: d.name.clone(),
                site: HookSite::Input,
                shape: d.shape.clone(),
                dtype: d.dtype,
            }),
    );
    for layer in 0..model.layers {
        hooks.extend(
            decls
                .iter()
                .filter(|d| d.scope == HookScope::PerLayer)
                .map(|d| HookSpec {
                    name: format!("layers.{layer}.{}", d.name),
                    site: HookSite::Layer(layer),
                    shape: d.shape.clone(),
                    dtype: d.dtype,
                }),
        );
    }
    hooks.extend(
        decls
            .iter()
            .filter(|d| d.scope == HookScope::Output)
            .map(|d| HookSpec {
                name: d.name.clone(),
                site: HookSite::Output,
                shape: d.shape.clone(),
                dtype: d.dtype,
            }),
    );
    HookRegistry::new(hooks)
}

impl HookRegistry {
    pub fn new(hooks: Vec<HookSpec>) -> Result<Self, CaptureError> {
        let mut by_name = HashMap::with_capacity(hooks.len());
        for (i, h) in hooks.iter().enumerate() {
            if by_name.insert(h.name.clone(), i as u32).is_some() {
                return Err(CaptureError::DuplicateHook(h.name.clone()));
            }
        }
        let n = hooks.len();
        Ok(Self {
            hooks,
            by_name,
            enabled: vec![true; n],
            staged: None,
        })
    }

    pub fn len(&self) -> usize {
        self.hooks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hooks.is_empty()
    }

    pub fn hooks(&self) -> &[HookSpec] {
        &self.hooks
    }

    pub fn hook(&self, id: u32) -> Result<&HookSpec, CaptureError> {
        self.hooks
            .get(id as usize)
            .ok_or(CaptureError::UnknownHookId(id))
    }

    pub fn id_of(&self, name: &str) -> Option<u32> {
        self.by_name.get(name).copied()
    }

    pub fn is_enabled(&self, id: u32) -> bool {
        self.enabled.get(id as usize).copied().unwrap_or(false)
    }

    /// Enabled hook ids in firing order.
    pub fn enabled_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.enabled
            .iter()
            .enumerate()
            .filter(|(_, on)| **on)
            .map(|(i, _)| i as u32)
    }

    pub fn enabled_count(&self) -> usize {
        self.enabled.iter().filter(|on| **on).count()
    }

    /// Stage a new enabled set; it takes effect at the next step boundary.
    pub fn set_hook_filter<S: AsRef<str>>(&mut self, enabled: &[S]) -> Result<(), CaptureError> {
        let mut mask = vec![false; self.hooks.len()];
        for name in enabled {
            let id = self
                .id_of(name.as_ref())
                .ok_or_else(|| CaptureError::UnknownHook(name.as_ref().to_string()))?;
            mask[id as usize] = true;
        }
        self.staged = Some(mask);
        Ok(())
    }

    pub fn enable_all(&mut self) {
        self.staged = Some(vec![true; self.hooks.len()]);
    }

    /// Apply a staged filter. Called by the step loop before planning a step.
    pub fn begin_step(&mut self) {
        if let Some(mask) = self.staged.take() {
            self.enabled = mask;
        }
    }

    pub fn enabled_names(&self) -> BTreeSet<&str> {
        self.enabled_ids()
            .map(|id| self.hooks[id as usize].name.as_str())
            .collect()
    }
}

/// A batch-major, contiguous tensor: `shape[0]` is the batch dimension.
#[derive(Clone, Copy, Debug)]
pub struct TensorView<'a> {
    bytes: &'a [u8],
    shape: &'a [usize],
    dtype: DType,
}

impl<'a> TensorView<'a> {
    pub fn new(bytes: &'a [u8], shape: &'a [usize], dtype: DType) -> Result<Self, CaptureError> {
        if shape.is_empty() {
            return Err(CaptureError::MissingBatchDim);
        }
        let expected = shape.iter().product::<usize>() * dtype.width();
        if expected != bytes.len() {
            return Err(CaptureError::ViewSize {
                actual: bytes.len(),
                shape: shape.to_vec(),
                width: dtype.width(),
            });
        }
        Ok(Self {
            bytes,
            shape,
            dtype,
        })
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn bytes(&self) -> &'a [u8] {
        self.bytes
    }

    /// Bytes of one batch slice.
    pub fn slice_len(&self) -> usize {
        self.shape[1..].iter().product::<usize>() * self.dtype.width()
    }
}

/// Timing model for the simulated device copy paths.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceCopyEngine {
    /// Bytes per second; infinite by default.
    #[serde(default = "infinite")]
    pub d2d_bandwidth: f64,
    pub d2h_bandwidth: f64,
    /// Seconds of fixed cost per device-to-host transfer.
    #[serde(default = "default_d2h_latency")]
    pub d2h_latency: f64,
    /// Seconds of fixed cost per copy-kernel launch.
    #[serde(default = "default_launch_overhead")]
    pub launch_overhead: f64,
}

fn infinite() -> f64 {
    f64::INFINITY
}
fn default_d2h_latency() -> f64 {
    10e-6
}
fn default_launch_overhead() -> f64 {
    2e-6
}

impl Default for DeviceCopyEngine {
    fn default() -> Self {
        Self {
            d2d_bandwidth: infinite(),
            d2h_bandwidth: 25e9,
            d2h_latency: default_d2h_latency(),
            launch_overhead: default_launch_overhead(),
        }
    }
}

impl DeviceCopyEngine {
    pub fn d2d_time(&self, bytes: u64) -> Duration {
        Duration::from_secs_f64(self.launch_overhead + bytes as f64 / self.d2d_bandwidth)
    }

    pub fn d2h_time(&self, bytes: u64) -> Duration {
        Duration::from_secs_f64(self.d2h_latency + bytes as f64 / self.d2h_bandwidth)
    }
}

/// Copy `src` into `dst` in 16-byte units, then the residual tail bytes.
pub fn copy_chunked(dst: &mut [u8], src: &[u8]) {
    assert_eq!(dst.len(), src.len());
    let mut d = dst.chunks_exact_mut(16);
    let mut s = src.chunks_exact(16);
    for (dc, sc) in (&mut d).zip(&mut s) {
        let word = u128::from_ne_bytes(sc.try_into().unwrap());
        dc.copy_from_slice(&word.to_ne_bytes());
    }
    let (dt, st) = (d.into_remainder(), s.remainder());
    for (db, sb) in dt.iter_mut().zip(st) {
        *db = *sb;
    }
}

/// Copy the kept batch slices of `src`, in batch order, into `dst`.
pub fn gather_compact(src: &[u8], slice_len: usize, keep: &KeepDropVector, dst: &mut [u8]) {
    assert_eq!(dst.len(), keep.kept_count() * slice_len);
    for (out, b) in dst.chunks_exact_mut(slice_len.max(1)).zip(keep.kept_indices()) {
        copy_chunked(out, &src[b * slice_len..(b + 1) * slice_len]);
    }
}

/// Whether a full ring stalls the capture or is a plan error.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OnRingFull {
    Stall,
    Fail,
}

/// Blocks a stalled capture until the drain frees ring space.
pub trait SpaceWaiter {
    /// Wait for the next drain completion. Returns the time spent waiting, or
    /// `None` when nothing in flight could ever free space.
    fn wait_for_space(&mut self) -> Option<Duration>;
}

impl<F: FnMut() -> Option<Duration>> SpaceWaiter for F {
    fn wait_for_space(&mut self) -> Option<Duration> {
        self()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CaptureOutcome {
    pub bytes_written: u64,
    pub stalled: Duration,
    pub stall_waits: u32,
    pub copy_time: Duration,
    pub descriptor: Option<Descriptor>,
}

/// Everything one capture call needs besides the tensor itself.
pub struct CaptureContext<'a, W: SpaceWaiter> {
    pub registry: &'a HookRegistry,
    pub ring: &'a mut RingProducer,
    pub engine: &'a DeviceCopyEngine,
    pub on_full: OnRingFull,
    pub waiter: &'a mut W,
}

/// Copy the kept slices of `view` into the payload ring and publish a
/// descriptor for them. Disabled hooks and all-drop keep vectors touch
/// nothing.
pub fn capture<W: SpaceWaiter>(
    ctx: &mut CaptureContext<'_, W>,
    hook_id: u32,
    step_seq: u32,
    view: &TensorView<'_>,
    keep: &KeepDropVector,
) -> Result<CaptureOutcome, CaptureError> {
    ctx.registry.hook(hook_id)?;
    if !ctx.registry.is_enabled(hook_id) {
        return Ok(CaptureOutcome::default());
    }
    if keep.len() != view.batch() {
        return Err(CaptureError::KeepLengthMismatch {
            keep: keep.len(),
            batch: view.batch(),
        });
    }
    let slice_len = view.slice_len();
    let len = (keep.kept_count() * slice_len) as u64;
    if len == 0 {
        return Ok(CaptureOutcome::default());
    }

    let mut outcome = CaptureOutcome::default();
    let region = loop {
        let attempt = if ctx.ring.meta_slot_free() {
            ctx.ring.reserve_payload(len)
        } else {
            Err(RingError::MetaRingFull)
        };
        match attempt {
            Ok(region) => break region,
            Err(e) if e.is_backpressure() => match ctx.on_full {
                OnRingFull::Fail => return Err(CaptureError::PolicyUnderestimate(e)),
                OnRingFull::Stall => {
                    let waited = ctx
                        .waiter
                        .wait_for_space()
                        .ok_or(CaptureError::NoProgress)?;
                    outcome.stalled += waited;
                    outcome.stall_waits += 1;
                }
            },
            Err(e) => return Err(e.into()),
        }
    };

    gather_compact(view.bytes(), slice_len, keep, ctx.ring.region_mut(&region));
    let mut desc = Descriptor::new(region.offset, len, hook_id, step_seq);
    desc.ready_seq = ctx.ring.publish(desc)?;
    outcome.bytes_written = len;
    outcome.copy_time = ctx.engine.d2d_time(len);
    outcome.descriptor = Some(desc);
    Ok(outcome)
}
