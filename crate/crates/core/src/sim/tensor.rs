//! Deterministic synthetic tensor contents and hidden-axis sharding.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one request's tensor at one hook in one step.
pub fn content_seed(seed: u64, request: u64, step: u32, hook: u32) -> u64 {
    [request, step as u64, hook as u64]
        .into_iter()
        .fold(mix(seed), |acc, v| mix(acc ^ v.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

/// Fill `out` with the full (unsharded) tensor bytes for a content seed.
pub fn fill_tensor(seed: u64, out: &mut [u8]) {
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(out);
}

/// Byte geometry of an axis split: `outer` blocks of `axis_len` elements of
/// `inner_bytes` each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AxisSplit {
    pub outer: usize,
    pub axis_len: usize,
    pub inner_bytes: usize,
}

impl AxisSplit {
    pub fn new(shape: &[usize], axis: usize, width: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            axis_len: shape[axis],
            inner_bytes: shape[axis + 1..].iter().product::<usize>() * width,
        }
    }
}

/// Extract shard `index` of `count` along the split axis.
pub fn shard(full: &[u8], split: AxisSplit, index: usize, count: usize, out: &mut Vec<u8>) {
    let w = split.axis_len / count;
    let row = split.axis_len * split.inner_bytes;
    let piece = w * split.inner_bytes;
    out.clear();
    for o in 0..split.outer {
        let start = o * row + index * piece;
        out.extend_from_slice(&full[start..start + piece]);
    }
}

/// Inverse of [`shard`]: interleave shards, in index order, back into the
/// full tensor. `split` describes the full tensor.
pub fn unshard(shards: &[&[u8]], split: AxisSplit) -> Vec<u8> {
    let piece = split.axis_len / shards.len() * split.inner_bytes;
    let mut out = Vec::with_capacity(piece * shards.len() * split.outer);
    for o in 0..split.outer {
        for s in shards {
            out.extend_from_slice(&s[o * piece..(o + 1) * piece]);
        }
    }
    out
}
