//! Meta-ring descriptor and its 64-byte wire layout.
//!
//! ```text
//! offset  size  field
//!      0     8  payload_offset   (u64 LE, bytes from payload ring base)
//!      8     8  payload_len      (u64 LE, unpadded payload bytes)
//!     16     4  hook_id          (u32 LE)
//!     20     4  step_seq         (u32 LE)
//!     24     8  ready_seq        (u64 LE, SENTINEL when the slot is free)
//!     32    32  reserved         (opaque to the ring)
//! ```

use std::cell::UnsafeCell;
use std::sync::atomic::{AtomicU64, Ordering};

/// Size of one serialized descriptor.
pub const DESCRIPTOR_SIZE: usize = 64;

/// `ready_seq` value marking a free slot.
pub const SENTINEL: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Descriptor {
    pub payload_offset: u64,
    pub payload_len: u64,
    pub hook_id: u32,
    pub step_seq: u32,
    pub ready_seq: u64,
    pub reserved: [u8; 32],
}

impl Descriptor {
    pub fn new(payload_offset: u64, payload_len: u64, hook_id: u32, step_seq: u32) -> Self {
        Self {
            payload_offset,
            payload_len,
            hook_id,
            step_seq,
            ready_seq: SENTINEL,
            reserved: [0; 32],
        }
    }

    pub fn with_reserved(mut self, reserved: [u8; 32]) -> Self {
        self.reserved = reserved;
        self
    }

    pub fn to_bytes(&self) -> [u8; DESCRIPTOR_SIZE] {
        let mut out = [0u8; DESCRIPTOR_SIZE];
        out[0..8].copy_from_slice(&self.payload_offset.to_le_bytes());
        out[8..16].copy_from_slice(&self.payload_len.to_le_bytes());
        out[16..20].copy_from_slice(&self.hook_id.to_le_bytes());
        out[20..24].copy_from_slice(&self.step_seq.to_le_bytes());
        out[24..32].copy_from_slice(&self.ready_seq.to_le_bytes());
        out[32..64].copy_from_slice(&self.reserved);
        out
    }

    pub fn from_bytes(bytes: &[u8; DESCRIPTOR_SIZE]) -> Self {
        let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let mut reserved = [0u8; 32];
        reserved.copy_from_slice(&bytes[32..64]);
        Self {
            payload_offset: u64_at(0),
            payload_len: u64_at(8),
            hook_id: u32_at(16),
            step_seq: u32_at(20),
            ready_seq: u64_at(24),
            reserved,
        }
    }
}

/// In-memory meta-ring slot. Mirrors the wire layout field for field so the
/// slot array is exactly `meta_slots * 64` bytes.
///
/// Everything except `ready_seq` is plain memory owned by whichever side the
/// `ready_seq` word currently grants it to: the producer while it holds the
/// sentinel, the consumer otherwise.
#[repr(C, align(64))]
pub(crate) struct MetaSlot {
    payload_offset: UnsafeCell<u64>,
    payload_len: UnsafeCell<u64>,
    hook_id: UnsafeCell<u32>,
    step_seq: UnsafeCell<u32>,
    ready_seq: AtomicU64,
    reserved: UnsafeCell<[u8; 32]>,
}

// SAFETY: access to the non-atomic fields is serialized by the ready_seq
// handoff (release store by the writer, acquire load by the reader).
unsafe impl Sync for MetaSlot {}

impl MetaSlot {
    pub(crate) fn free() -> Self {
        Self {
            payload_offset: UnsafeCell::new(0),
            payload_len: UnsafeCell::new(0),
            hook_id: UnsafeCell::new(0),
            step_seq: UnsafeCell::new(0),
            ready_seq: AtomicU64::new(SENTINEL),
            reserved: UnsafeCell::new([0; 32]),
        }
    }

    pub(crate) fn is_free(&self) -> bool {
        self.ready_seq.load(Ordering::Acquire) == SENTINEL
    }

    pub(crate) fn ready_seq(&self) -> u64 {
        self.ready_seq.load(Ordering::Acquire)
    }

    /// Producer side. Caller must have observed the slot free.
    pub(crate) unsafe fn store(&self, desc: &Descriptor, seq: u64) {
        *self.payload_offset.get() = desc.payload_offset;
        *self.payload_len.get() = desc.payload_len;
        *self.hook_id.get() = desc.hook_id;
        *self.step_seq.get() = desc.step_seq;
        *self.reserved.get() = desc.reserved;
        self.ready_seq.store(seq, Ordering::Release);
    }

    /// Consumer side. Caller must have observed `ready_seq != SENTINEL`.
    pub(crate) unsafe fn load(&self, seq: u64) -> Descriptor {
        Descriptor {
            payload_offset: *self.payload_offset.get(),
            payload_len: *self.payload_len.get(),
            hook_id: *self.hook_id.get(),
            step_seq: *self.step_seq.get(),
            ready_seq: seq,
            reserved: *self.reserved.get(),
        }
    }

    pub(crate) fn reset(&self) {
        self.ready_seq.store(SENTINEL, Ordering::Release);
    }
}
