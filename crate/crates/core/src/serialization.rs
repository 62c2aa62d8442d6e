//! Space-filling-curve ordering for voxelized clouds.
//!
//! A cloud is serialized by sorting its points on a composite key
//! `(batch : curve(voxel) : t)`. The scan index sits in the low-order bits,
//! so the same voxel observed in different scans lands in one contiguous run
//! of the sequence. That run structure is what the downstream sequence
//! operators exploit: a static surface shows up as a run of `f` points with
//! identical curve position and increasing `t`, a moving one does not.

use crate::error::{Error, Result};
use crate::aggregation::SpatioTemporalCloud;

/// Bits per axis in the spatial key. 3 * 16 = 48 spatial bits, leaving 8 for
/// the scan index below and 8 for a batch id above in a single u64.
pub const DEFAULT_BITS: u32 = 16;

const T_BITS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SerializationPattern {
    Zorder,
    ZorderTransposed,
    Hilbert,
    HilbertTransposed,
}

impl SerializationPattern {
    pub const ALL: [SerializationPattern; 4] = [
        SerializationPattern::Zorder,
        SerializationPattern::ZorderTransposed,
        SerializationPattern::Hilbert,
        SerializationPattern::HilbertTransposed,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SerializationPattern::Zorder => "z",
            SerializationPattern::ZorderTransposed => "zt",
            SerializationPattern::Hilbert => "hilbert",
            SerializationPattern::HilbertTransposed => "hilbertt",
        }
    }

    pub fn parse(s: &str) -> Option<SerializationPattern> {
        match s {
            "z" | "zorder" => Some(SerializationPattern::Zorder),
            "zt" | "zorder-t" => Some(SerializationPattern::ZorderTransposed),
            "hilbert" | "h" => Some(SerializationPattern::Hilbert),
            "hilbertt" | "hilbert-t" | "ht" => Some(SerializationPattern::HilbertTransposed),
            _ => None,
        }
    }
}

/// Spreads the low 21 bits of `v` so three of them interleave into a u64.
fn part1by2(v: u64) -> u64 {
    let mut x = v & 0x1f_ffff;
    x = (x | x << 32) & 0x1f00_0000_0000_ffff;
    x = (x | x << 16) & 0x1f_0000_ff00_00ff;
    x = (x | x << 8) & 0x100f_00f0_0f00_f00f;
    x = (x | x << 4) & 0x10c3_0c30_c30c_30c3;
    x = (x | x << 2) & 0x1249_2492_4924_9249;
    x
}

/// Z-order key: bit `i` of x lands at key bit `3i`, y at `3i+1`, z at `3i+2`.
pub fn morton_encode(coords: [u64; 3], bits: u32) -> u64 {
    debug_assert!(3 * bits <= 48, "3*bits must fit the 48-bit spatial field");
    debug_assert!(coords.iter().all(|&c| c < 1 << bits));
    part1by2(coords[0]) | part1by2(coords[1]) << 1 | part1by2(coords[2]) << 2
}

/// Hilbert key via the transpose-form algorithm: map axes to the transposed
/// Hilbert representation in place, then interleave its bits (axis 0 most
/// significant within each triple).
pub fn hilbert_encode(coords: [u64; 3], bits: u32) -> u64 {
    debug_assert!(3 * bits <= 48);
    debug_assert!(coords.iter().all(|&c| c < 1 << bits));
    let mut x = coords;
    let m = 1u64 << (bits - 1);

    // Inverse undo excess work
    let mut q = m;
    while q > 1 {
        let p = q - 1;
        for i in 0..3 {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q >>= 1;
    }

    // Gray encode
    for i in 1..3 {
        x[i] ^= x[i - 1];
    }
    let mut t = 0u64;
    q = m;
    while q > 1 {
        if x[2] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for v in &mut x {
        *v ^= t;
    }

    let mut key = 0u64;
    for j in (0..bits).rev() {
        for v in &x {
            key = key << 1 | (v >> j & 1);
        }
    }
    key
}

/// Curve key for one voxel. Transposed patterns swap the x and y axes
/// before encoding.
pub fn spatial_key(pattern: SerializationPattern, coords: [u64; 3], bits: u32) -> u64 {
    use SerializationPattern::*;
    let c = match pattern {
        Zorder | Hilbert => coords,
        ZorderTransposed | HilbertTransposed => [coords[1], coords[0], coords[2]],
    };
    match pattern {
        Zorder | ZorderTransposed => morton_encode(c, bits),
        Hilbert | HilbertTransposed => hilbert_encode(c, bits),
    }
}

/// Packs `(batch : spatial : t)` with the scan index in the low bits, so a
/// voxel seen across scans forms one contiguous, time-ordered run.
pub fn composite_key(batch: u8, spatial: u64, t: u8) -> u64 {
    (batch as u64) << (3 * DEFAULT_BITS + T_BITS) | spatial << T_BITS | t as u64
}

/// The ordering produced by [`serialize`]: `order[j]` is the cloud index at
/// sequence position `j`, `inverse[i]` the sequence position of cloud
/// index `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerializedSequence {
    pub pattern: SerializationPattern,
    pub order: Vec<usize>,
    pub inverse: Vec<usize>,
}

impl SerializedSequence {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

pub fn serialize(
    cloud: &SpatioTemporalCloud,
    pattern: SerializationPattern,
    grid_size: f64,
) -> Result<SerializedSequence> {
    let coords: Vec<[i64; 3]> = cloud
        .positions
        .iter()
        .map(|p| {
            [
                (p[0] / grid_size).floor() as i64,
                (p[1] / grid_size).floor() as i64,
                (p[2] / grid_size).floor() as i64,
            ]
        })
        .collect();
    serialize_coords(&coords, &cloud.scan_ids, pattern, DEFAULT_BITS)
}

/// Serialization on precomputed integer voxel coordinates. Coordinates are
/// shifted to start at zero per axis; the shifted extent must fit `bits`.
pub fn serialize_coords(
    coords: &[[i64; 3]],
    scan_ids: &[u32],
    pattern: SerializationPattern,
    bits: u32,
) -> Result<SerializedSequence> {
    if coords.is_empty() {
        return Ok(SerializedSequence {
            pattern,
            order: Vec::new(),
            inverse: Vec::new(),
        });
    }
    let mut min = [i64::MAX; 3];
    for c in coords {
        for a in 0..3 {
            min[a] = min[a].min(c[a]);
        }
    }
    let limit = 1i64 << bits;
    let mut keys = Vec::with_capacity(coords.len());
    for (c, &t) in coords.iter().zip(scan_ids) {
        let mut shifted = [0u64; 3];
        for a in 0..3 {
            let s = c[a] - min[a];
            if s >= limit {
                return Err(Error::CoordinateOutOfRange { coord: c[a], bits });
            }
            shifted[a] = s as u64;
        }
        if t >= 1 << T_BITS {
            return Err(Error::CoordinateOutOfRange {
                coord: t as i64,
                bits: T_BITS,
            });
        }
        keys.push(composite_key(0, spatial_key(pattern, shifted, bits), t as u8));
    }
    let mut order: Vec<usize> = (0..coords.len()).collect();
    order.sort_by_key(|&i| keys[i]);
    let mut inverse = vec![0usize; order.len()];
    for (pos, &i) in order.iter().enumerate() {
        inverse[i] = pos;
    }
    Ok(SerializedSequence {
        pattern,
        order,
        inverse,
    })
}

/// Restores serialized per-point values to cloud order:
/// `out[order[j]] = values[j]`.
pub fn deserialize<T: Clone>(values: &[T], seq: &SerializedSequence) -> Result<Vec<T>> {
    if values.len() != seq.order.len() {
        return Err(Error::LengthMismatch {
            what: "serialized values",
            got: values.len(),
            expected: seq.order.len(),
        });
    }
    let mut out: Vec<T> = values.to_vec();
    for (j, &i) in seq.order.iter().enumerate() {
        out[i] = values[j].clone();
    }
    Ok(out)
}

/// Pattern for the `block_index`-th network block: round-robin over the
/// configured list.
pub fn pattern_for_block(
    block_index: usize,
    patterns: &[SerializationPattern],
) -> Result<SerializationPattern> {
    if patterns.is_empty() {
        return Err(Error::EmptyPatternList);
    }
    Ok(patterns[block_index % patterns.len()])
}
