//! Dual ring-buffer staging: a byte-addressed payload ring in the simulated
//! device arena plus a fixed-slot meta ring of 64-byte descriptors.
//!
//! One producer (the capture path) and one consumer (the drain worker) per
//! ring pair. Head and tail are kept as monotonically increasing virtual byte
//! positions; the physical offset is `position % payload_capacity`.
//!
//! A reservation never splits across the end of the ring. When the bytes left
//! before the end are too few, the head jumps to the next wrap boundary and the
//! skipped bytes stay dead until the tail passes them.

mod descriptor;

pub use descriptor::{Descriptor, DESCRIPTOR_SIZE, SENTINEL};

use descriptor::MetaSlot;
use serde::{Deserialize, Serialize};
use std::alloc::{self, Layout};
use std::collections::VecDeque;
use std::ptr::NonNull;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use thiserror::Error;

/// Width of the chunked copy unit. Payload regions are padded to it.
pub const COPY_UNIT: u64 = 16;

const NO_DEAD: u64 = u64::MAX;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RingError {
    #[error("invalid ring config: {0}")]
    InvalidConfig(String),
    #[error("device arena exhausted: requested {requested} bytes, {available} available")]
    ArenaExhausted { requested: u64, available: u64 },
    #[error("payload ring full: need {requested} bytes, {free} free")]
    RingFull { requested: u64, free: u64 },
    #[error("meta ring full")]
    MetaRingFull,
    #[error("region of {len} bytes can never fit a ring of {capacity} bytes")]
    TooLarge { len: u64, capacity: u64 },
    #[error("zero-length payload region")]
    ZeroLength,
    #[error("out-of-order release: expected offset {expected}, got {got}")]
    OutOfOrderRelease { expected: u64, got: u64 },
    #[error("descriptor does not match the oldest unpublished reservation")]
    UnknownRegion,
}

impl RingError {
    /// Both fullness variants are the same backpressure signal.
    pub fn is_backpressure(&self) -> bool {
        matches!(self, RingError::RingFull { .. } | RingError::MetaRingFull)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RingConfig {
    pub payload_capacity: u64,
    pub meta_slots: u32,
    #[serde(default = "default_watermark")]
    pub high_watermark: f64,
}

fn default_watermark() -> f64 {
    0.8
}

impl RingConfig {
    pub fn new(payload_capacity: u64, meta_slots: u32) -> Self {
        Self {
            payload_capacity,
            meta_slots,
            high_watermark: default_watermark(),
        }
    }

    pub fn validate(&self) -> Result<(), RingError> {
        if self.payload_capacity == 0 || !self.payload_capacity.is_multiple_of(COPY_UNIT) {
            return Err(RingError::InvalidConfig(format!(
                "payload_capacity {} must be a positive multiple of {COPY_UNIT}",
                self.payload_capacity
            )));
        }
        if self.meta_slots == 0 {
            return Err(RingError::InvalidConfig("meta_slots must be > 0".into()));
        }
        if !(self.high_watermark > 0.0 && self.high_watermark <= 1.0) {
            return Err(RingError::InvalidConfig(format!(
                "high_watermark {} outside (0, 1]",
                self.high_watermark
            )));
        }
        Ok(())
    }
}

pub fn round_up_to_unit(len: u64) -> u64 {
    len.div_ceil(COPY_UNIT) * COPY_UNIT
}

/// A region handed out by a [`DeviceArena`], addressed in simulated device
/// address space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeviceRegion {
    pub base: u64,
    pub len: u64,
}

impl DeviceRegion {
    pub fn overlaps(&self, other: &DeviceRegion) -> bool {
        self.base < other.base + other.len && other.base < self.base + self.len
    }
}

/// Bump allocator standing in for device memory of a fixed budget.
#[derive(Debug)]
pub struct DeviceArena {
    capacity: u64,
    next: u64,
}

impl DeviceArena {
    pub fn new(capacity: u64) -> Self {
        Self { capacity, next: 0 }
    }

    /// An arena with an effectively unlimited budget.
    pub fn unbounded() -> Self {
        Self::new(u64::MAX / 2)
    }

    pub fn available(&self) -> u64 {
        self.capacity - self.next
    }

    fn carve(&mut self, len: u64) -> Result<DeviceRegion, RingError> {
        if len > self.available() {
            return Err(RingError::ArenaExhausted {
                requested: len,
                available: self.available(),
            });
        }
        let region = DeviceRegion {
            base: self.next,
            len,
        };
        self.next += len;
        Ok(region)
    }
}

struct PayloadBuf {
    ptr: NonNull<u8>,
    layout: Layout,
}

impl PayloadBuf {
    fn zeroed(len: u64) -> Result<Self, RingError> {
        let exhausted = || RingError::ArenaExhausted {
            requested: len,
            available: 0,
        };
        let size = usize::try_from(len).map_err(|_| exhausted())?;
        let layout = Layout::from_size_align(size, COPY_UNIT as usize).map_err(|_| exhausted())?;
        // SAFETY: size > 0 is guaranteed by RingConfig::validate.
        let ptr = unsafe { alloc::alloc_zeroed(layout) };
        let ptr = NonNull::new(ptr).ok_or_else(exhausted)?;
        Ok(Self { ptr, layout })
    }
}

impl Drop for PayloadBuf {
    fn drop(&mut self) {
        // SAFETY: allocated in `zeroed` with this layout.
        unsafe { alloc::dealloc(self.ptr.as_ptr(), self.layout) }
    }
}

struct Shared {
    config: RingConfig,
    device: DeviceRegion,
    payload: PayloadBuf,
    slots: Box<[MetaSlot]>,
    head: AtomicU64,
    tail: AtomicU64,
    published_end: AtomicU64,
    dead_from: AtomicU64,
    meta_head: AtomicU64,
    meta_tail: AtomicU64,
    reserved_total: AtomicU64,
    dead_total: AtomicU64,
    released_total: AtomicU64,
    dead_released: AtomicU64,
}

// SAFETY: the payload buffer is only touched through disjoint regions whose
// ownership is handed between the two halves by the head/tail/published_end
// protocol; the meta slots synchronize through their ready_seq word.
unsafe impl Send for Shared {}
unsafe impl Sync for Shared {}

impl Shared {
    fn cap(&self) -> u64 {
        self.config.payload_capacity
    }

    fn state(&self) -> RingState {
        let head = self.head.load(Ordering::Acquire);
        let tail = self.tail.load(Ordering::Acquire);
        let dead_from = self.dead_from.load(Ordering::Acquire);
        let cap = self.cap();
        let dead_outstanding = if dead_from != NO_DEAD && dead_from >= tail {
            cap - dead_from % cap
        } else {
            0
        };
        let meta_head = self.meta_head.load(Ordering::Acquire);
        let meta_tail = self.meta_tail.load(Ordering::Acquire);
        RingState {
            capacity: cap,
            meta_slots: self.config.meta_slots,
            payload_head: head % cap,
            payload_tail: tail % cap,
            head_position: head,
            tail_position: tail,
            occupancy: head - tail,
            dead_outstanding,
            meta_head: (meta_head % self.config.meta_slots as u64) as u32,
            meta_tail: (meta_tail % self.config.meta_slots as u64) as u32,
            meta_occupancy: (meta_head - meta_tail) as u32,
            reserved_total: self.reserved_total.load(Ordering::Acquire),
            released_total: self.released_total.load(Ordering::Acquire),
            dead_total: self.dead_total.load(Ordering::Acquire),
            dead_released: self.dead_released.load(Ordering::Acquire),
        }
    }

    /// Smallest virtual position >= `tail` whose physical offset is `offset`.
    fn locate(&self, tail: u64, offset: u64) -> u64 {
        let cap = self.cap();
        tail + (offset + cap - tail % cap) % cap
    }
}

/// Snapshot of both rings. `occupancy` counts every byte between tail and
/// head, including dead skip bytes not yet passed by the tail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RingState {
    pub capacity: u64,
    pub meta_slots: u32,
    pub payload_head: u64,
    pub payload_tail: u64,
    pub head_position: u64,
    pub tail_position: u64,
    pub occupancy: u64,
    pub dead_outstanding: u64,
    pub meta_head: u32,
    pub meta_tail: u32,
    pub meta_occupancy: u32,
    pub reserved_total: u64,
    pub released_total: u64,
    pub dead_total: u64,
    pub dead_released: u64,
}

impl RingState {
    /// Fill fraction of whichever ring is fuller.
    pub fn pressure(&self) -> f64 {
        let payload = self.occupancy as f64 / self.capacity as f64;
        let meta = self.meta_occupancy as f64 / self.meta_slots as f64;
        payload.max(meta)
    }

    pub fn free_bytes(&self) -> u64 {
        self.capacity - self.occupancy
    }

    pub fn free_slots(&self) -> u32 {
        self.meta_slots - self.meta_occupancy
    }

    /// Bytes holding reserved-but-unreleased payload.
    pub fn live_bytes(&self) -> u64 {
        self.occupancy - self.dead_outstanding
    }

    /// Whether the given reservation sizes, issued in order against this
    /// state with no intervening release, all succeed. Mirrors
    /// [`RingProducer::reserve_payload`] exactly, padding and wrap skips
    /// included.
    pub fn fits_sequence<I: IntoIterator<Item = u64>>(&self, lens: I) -> bool {
        let cap = self.capacity;
        let mut head = self.head_position;
        let mut tail = self.tail_position;
        let mut slots = self.free_slots();
        for len in lens {
            let padded = round_up_to_unit(len);
            if padded == 0 {
                continue;
            }
            if padded > cap || slots == 0 {
                return false;
            }
            let pos = head % cap;
            let start = if cap - pos < padded { head + (cap - pos) } else { head };
            if start != head && head == tail {
                tail = start;
            }
            if start + padded - tail > cap {
                return false;
            }
            head = start + padded;
            slots -= 1;
        }
        true
    }
}

/// A reserved, not yet published payload region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PayloadRegion {
    pub offset: u64,
    pub len: u64,
    pub padded_len: u64,
}

#[derive(Clone, Copy, Debug)]
struct Pending {
    start: u64,
    region: PayloadRegion,
}

/// Allocate a ring pair for one rank.
pub fn allocate_rings(arena: &mut DeviceArena, config: RingConfig) -> Result<Ring2, RingError> {
    config.validate()?;
    let device = arena.carve(config.payload_capacity)?;
    let payload = PayloadBuf::zeroed(config.payload_capacity)?;
    let slots = (0..config.meta_slots).map(|_| MetaSlot::free()).collect();
    let shared = Arc::new(Shared {
        config,
        device,
        payload,
        slots,
        head: AtomicU64::new(0),
        tail: AtomicU64::new(0),
        published_end: AtomicU64::new(0),
        dead_from: AtomicU64::new(NO_DEAD),
        meta_head: AtomicU64::new(0),
        meta_tail: AtomicU64::new(0),
        reserved_total: AtomicU64::new(0),
        dead_total: AtomicU64::new(0),
        released_total: AtomicU64::new(0),
        dead_released: AtomicU64::new(0),
    });
    Ok(Ring2 {
        producer: RingProducer {
            shared: shared.clone(),
            head: 0,
            meta_head: 0,
            pending: VecDeque::new(),
        },
        consumer: RingConsumer {
            shared,
            meta_tail: 0,
        },
    })
}

/// Both halves of a ring pair. Split it to hand the halves to different
/// threads; keep it whole when one loop drives both roles.
pub struct Ring2 {
    pub producer: RingProducer,
    pub consumer: RingConsumer,
}

impl Ring2 {
    pub fn split(self) -> (RingProducer, RingConsumer) {
        (self.producer, self.consumer)
    }

    pub fn state(&self) -> RingState {
        self.producer.shared.state()
    }

    pub fn config(&self) -> &RingConfig {
        &self.producer.shared.config
    }

    pub fn device_region(&self) -> DeviceRegion {
        self.producer.shared.device
    }
}

pub struct RingProducer {
    shared: Arc<Shared>,
    head: u64,
    meta_head: u64,
    pending: VecDeque<Pending>,
}

impl RingProducer {
    pub fn config(&self) -> &RingConfig {
        &self.shared.config
    }

    pub fn state(&self) -> RingState {
        self.shared.state()
    }

    /// Whether the next meta slot is free for publication.
    pub fn meta_slot_free(&self) -> bool {
        let idx = (self.meta_head % self.shared.config.meta_slots as u64) as usize;
        self.shared.slots[idx].is_free()
    }

    pub fn reserve_payload(&mut self, len: u64) -> Result<PayloadRegion, RingError> {
        if len == 0 {
            return Err(RingError::ZeroLength);
        }
        let cap = self.shared.cap();
        let padded = round_up_to_unit(len);
        if padded > cap {
            return Err(RingError::TooLarge { len, capacity: cap });
        }
        let mut tail = self.shared.tail.load(Ordering::Acquire);
        let pos = self.head % cap;
        let start = if cap - pos < padded {
            self.head + (cap - pos)
        } else {
            self.head
        };
        if start != self.head && tail == self.head {
            // Empty ring: no release will ever pass the skip, so pass it here.
            // The consumer holds nothing and cannot be writing the tail.
            let skip = start - self.head;
            self.shared.dead_total.fetch_add(skip, Ordering::AcqRel);
            self.shared.dead_released.fetch_add(skip, Ordering::AcqRel);
            self.shared.tail.store(start, Ordering::Release);
            self.head = start;
            self.shared.head.store(start, Ordering::Release);
            tail = start;
        }
        if start + padded - tail > cap {
            return Err(RingError::RingFull {
                requested: padded,
                free: cap - (self.head - tail),
            });
        }
        if start != self.head {
            self.shared.dead_from.store(self.head, Ordering::Release);
            self.shared
                .dead_total
                .fetch_add(start - self.head, Ordering::AcqRel);
        }
        self.head = start + padded;
        self.shared.head.store(self.head, Ordering::Release);
        self.shared
            .reserved_total
            .fetch_add(padded, Ordering::AcqRel);
        let region = PayloadRegion {
            offset: start % cap,
            len,
            padded_len: padded,
        };
        self.pending.push_back(Pending { start, region });
        Ok(region)
    }

    /// Writable view of a reserved region that has not been published yet.
    ///
    /// Panics if `region` is not an outstanding reservation of this ring.
    pub fn region_mut(&mut self, region: &PayloadRegion) -> &mut [u8] {
        let found = self.pending.iter().any(|p| p.region == *region);
        assert!(found, "region {region:?} is not an unpublished reservation");
        // SAFETY: the region lies in [tail, head) and is unpublished, so the
        // consumer cannot read it and no other reservation overlaps it.
        unsafe {
            std::slice::from_raw_parts_mut(
                self.shared.payload.ptr.as_ptr().add(region.offset as usize),
                region.len as usize,
            )
        }
    }

    /// Publish the descriptor for the oldest unpublished reservation.
    /// Returns the publication sequence stored in `ready_seq`.
    pub fn publish(&mut self, descriptor: Descriptor) -> Result<u64, RingError> {
        let front = self.pending.front().ok_or(RingError::UnknownRegion)?;
        if front.region.offset != descriptor.payload_offset
            || front.region.len != descriptor.payload_len
        {
            return Err(RingError::UnknownRegion);
        }
        let idx = (self.meta_head % self.shared.config.meta_slots as u64) as usize;
        let slot = &self.shared.slots[idx];
        if !slot.is_free() {
            return Err(RingError::MetaRingFull);
        }
        let end = front.start + front.region.padded_len;
        self.pending.pop_front();
        self.shared.published_end.store(end, Ordering::Release);
        let seq = self.meta_head;
        // SAFETY: the slot was observed free with an acquire load, and only
        // this producer fills slots.
        unsafe { slot.store(&descriptor, seq) };
        self.meta_head += 1;
        self.shared.meta_head.store(self.meta_head, Ordering::Release);
        Ok(seq)
    }
}

pub struct RingConsumer {
    shared: Arc<Shared>,
    meta_tail: u64,
}

impl RingConsumer {
    pub fn config(&self) -> &RingConfig {
        &self.shared.config
    }

    pub fn state(&self) -> RingState {
        self.shared.state()
    }

    /// The producer also moves the tail, but only while the ring is empty.
    fn tail(&self) -> u64 {
        self.shared.tail.load(Ordering::Acquire)
    }

    fn scan(&self, max_n: usize) -> impl Iterator<Item = (usize, u64)> + '_ {
        let slots = self.shared.config.meta_slots as u64;
        (0..(max_n as u64).min(slots))
            .map(move |i| {
                let pos = self.meta_tail + i;
                let idx = (pos % slots) as usize;
                (idx, pos, self.shared.slots[idx].ready_seq())
            })
            .take_while(|&(_, pos, seq)| seq != SENTINEL && seq == pos)
            .map(|(idx, _, seq)| (idx, seq))
    }

    /// Ready descriptors from the tail, without consuming them.
    pub fn peek_ready(&self, max_n: usize) -> Vec<Descriptor> {
        self.scan(max_n)
            // SAFETY: ready_seq was observed non-sentinel with acquire.
            .map(|(idx, seq)| unsafe { self.shared.slots[idx].load(seq) })
            .collect()
    }

    pub fn ready_count(&self) -> usize {
        self.scan(usize::MAX).count()
    }

    /// Consume up to `max_n` ready descriptors in publication order, resetting
    /// each slot to the sentinel.
    pub fn poll_ready(&mut self, max_n: usize) -> Vec<Descriptor> {
        let taken: Vec<(usize, u64)> = self.scan(max_n).collect();
        let mut out = Vec::with_capacity(taken.len());
        for (idx, seq) in taken {
            let slot = &self.shared.slots[idx];
            // SAFETY: as in peek_ready; the slot is reset only after the copy.
            out.push(unsafe { slot.load(seq) });
            slot.reset();
            self.meta_tail += 1;
        }
        self.shared
            .meta_tail
            .store(self.meta_tail, Ordering::Release);
        out
    }

    /// Payload bytes of a published, not yet released region.
    ///
    /// Panics if the descriptor does not describe such a region.
    pub fn payload(&self, descriptor: &Descriptor) -> &[u8] {
        let padded = round_up_to_unit(descriptor.payload_len);
        let start = self.shared.locate(self.tail(), descriptor.payload_offset);
        let published = self.shared.published_end.load(Ordering::Acquire);
        assert!(
            descriptor.payload_len > 0 && start + padded <= published,
            "descriptor {descriptor:?} is not a published region"
        );
        // SAFETY: the region is published (the producer no longer writes it)
        // and not yet released (the producer cannot reuse it).
        unsafe {
            std::slice::from_raw_parts(
                self.shared
                    .payload
                    .ptr
                    .as_ptr()
                    .add(descriptor.payload_offset as usize),
                descriptor.payload_len as usize,
            )
        }
    }

    /// Advance the tail past the region at `offset`, which must be the oldest
    /// unreleased region. A dead skip preceding it is passed as well.
    pub fn release_payload(&mut self, offset: u64, len: u64) -> Result<(), RingError> {
        if len == 0 {
            return Err(RingError::ZeroLength);
        }
        let cap = self.shared.cap();
        let padded = round_up_to_unit(len);
        let mut tail = self.tail();
        let mut skipped = 0;
        if self.shared.dead_from.load(Ordering::Acquire) == tail && !tail.is_multiple_of(cap) {
            skipped = cap - tail % cap;
            tail += skipped;
        }
        if tail % cap != offset {
            return Err(RingError::OutOfOrderRelease {
                expected: tail % cap,
                got: offset,
            });
        }
        if tail + padded > self.shared.published_end.load(Ordering::Acquire) {
            return Err(RingError::OutOfOrderRelease {
                expected: tail % cap,
                got: offset,
            });
        }
        self.shared
            .dead_released
            .fetch_add(skipped, Ordering::AcqRel);
        self.shared
            .released_total
            .fetch_add(padded, Ordering::AcqRel);
        self.shared.tail.store(tail + padded, Ordering::Release);
        Ok(())
    }
}
