//! Folds a window of consecutive scans into one ego-motion-compensated cloud
//! with a per-point scan index, and quantizes clouds onto a voxel grid.
//!
//! Scan index `t` counts backwards from the current scan: `t = 0` is the
//! newest scan, `t = 1` the one before it. Points of equal `t` stay
//! contiguous in storage, current scan first.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kitti_io::{PoseMatrix, RawScan};

/// An aggregated multi-scan cloud. `positions` are in the current scan's
/// frame; `scan_ids[i]` tells which scan point `i` came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatioTemporalCloud {
    pub positions: Vec<[f64; 3]>,
    pub scan_ids: Vec<u32>,
    pub counts_per_scan: Vec<usize>,
}

impl SpatioTemporalCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Number of scans folded into this cloud.
    pub fn num_scans(&self) -> usize {
        self.counts_per_scan.len()
    }
}

/// Mapping from the points of a cloud onto its voxel representatives.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    pub grid_size: f64,
    /// For every input point, the index of its representative.
    pub point_to_voxel: Vec<usize>,
    /// Integer grid coordinates per representative.
    pub voxel_coords: Vec<[i64; 3]>,
}

impl VoxelGrid {
    pub fn num_voxels(&self) -> usize {
        self.voxel_coords.len()
    }
}

/// Applies a rigid transform to every point; intensity rides along.
pub fn transform_scan(scan: &RawScan, pose: &PoseMatrix) -> RawScan {
    RawScan {
        points: scan
            .points
            .iter()
            .map(|&p| pose.transform_point(p))
            .collect(),
        intensities: scan.intensities.clone(),
    }
}

/// Relative poses `T_t^0 = P_current^-1 * P_(current-t)` for `t = 0..f`.
///
/// `absolute[i]` is the pose of scan `i` in a common frame; the window ends
/// at `current` and reaches `f - 1` scans into the past.
pub fn relative_poses(
    absolute: &[PoseMatrix],
    current: usize,
    f: usize,
) -> Result<Vec<PoseMatrix>> {
    if f == 0 || current + 1 < f || current >= absolute.len() {
        return Err(Error::LengthMismatch {
            what: "pose window",
            got: absolute.len(),
            expected: current + 1,
        });
    }
    let inv_cur = absolute[current].inverse();
    Ok((0..f)
        .map(|t| inv_cur.compose(&absolute[current - t]))
        .collect())
}

/// Compensates every scan with its relative pose and concatenates them.
///
/// `scans[t]` is the scan `t` steps in the past and `poses[t]` must map its
/// frame into the current scan's frame (so `poses[0]` is the identity).
pub fn aggregate_scans(
    scans: &[RawScan],
    poses: &[PoseMatrix],
) -> Result<SpatioTemporalCloud> {
    if scans.len() != poses.len() {
        return Err(Error::LengthMismatch {
            what: "poses",
            got: poses.len(),
            expected: scans.len(),
        });
    }
    let total: usize = scans.iter().map(|s| s.len()).sum();
    let mut positions = Vec::with_capacity(total);
    let mut scan_ids = Vec::with_capacity(total);
    let mut counts = Vec::with_capacity(scans.len());
    for (t, (scan, pose)) in scans.iter().zip(poses).enumerate() {
        for &p in &scan.points {
            positions.push(pose.transform_point(p));
        }
        scan_ids.extend(std::iter::repeat_n(t as u32, scan.len()));
        counts.push(scan.len());
    }
    Ok(SpatioTemporalCloud {
        positions,
        scan_ids,
        counts_per_scan: counts,
    })
}

/// Concatenates per-scan labels in the same order as [`aggregate_scans`].
pub fn aggregate_labels(labels: &[Vec<u32>], scans: &[RawScan]) -> Result<Vec<u32>> {
    if labels.len() != scans.len() {
        return Err(Error::LengthMismatch {
            what: "label files",
            got: labels.len(),
            expected: scans.len(),
        });
    }
    let mut out = Vec::new();
    for (l, s) in labels.iter().zip(scans) {
        if l.len() != s.len() {
            return Err(Error::CountMismatch {
                what: "labels vs points in scan",
                got: l.len(),
                expected: s.len(),
            });
        }
        out.extend_from_slice(l);
    }
    Ok(out)
}

fn grid_coord(v: f64, grid_size: f64) -> i64 {
    (v / grid_size).floor() as i64
}

/// Quantizes a cloud onto `grid_size` voxels. Points sharing a `(voxel, t)`
/// cell merge into one representative at their mean position; merging never
/// crosses scan boundaries. Representatives are ordered by `(t, voxel)` so
/// the output is again a valid [`SpatioTemporalCloud`].
pub fn voxelize(cloud: &SpatioTemporalCloud, grid_size: f64) -> (SpatioTemporalCloud, VoxelGrid) {
    let mut cells: BTreeMap<(u32, [i64; 3]), usize> = BTreeMap::new();
    let keys: Vec<(u32, [i64; 3])> = cloud
        .positions
        .iter()
        .zip(&cloud.scan_ids)
        .map(|(p, &t)| {
            (
                t,
                [
                    grid_coord(p[0], grid_size),
                    grid_coord(p[1], grid_size),
                    grid_coord(p[2], grid_size),
                ],
            )
        })
        .collect();
    for key in &keys {
        let next = cells.len();
        cells.entry(*key).or_insert(next);
    }
    // BTreeMap iteration is (t, voxel)-sorted; renumber in that order.
    let mut voxel_coords = Vec::with_capacity(cells.len());
    let mut scan_ids = Vec::with_capacity(cells.len());
    for (i, ((t, coord), slot)) in cells.iter_mut().enumerate() {
        *slot = i;
        voxel_coords.push(*coord);
        scan_ids.push(*t);
    }

    let n_voxels = voxel_coords.len();
    let point_to_voxel: Vec<usize> = keys.iter().map(|k| cells[k]).collect();

    // Members are sorted by coordinate before summing so the centroid does
    // not depend on the order points arrived in.
    let mut members: Vec<Vec<[f64; 3]>> = vec![Vec::new(); n_voxels];
    for (p, &v) in cloud.positions.iter().zip(&point_to_voxel) {
        members[v].push(*p);
    }
    let positions: Vec<[f64; 3]> = members
        .iter_mut()
        .map(|pts| {
            pts.sort_by(|a, b| {
                a[0].total_cmp(&b[0])
                    .then(a[1].total_cmp(&b[1]))
                    .then(a[2].total_cmp(&b[2]))
            });
            let mut s = [0.0f64; 3];
            for p in pts.iter() {
                for a in 0..3 {
                    s[a] += p[a];
                }
            }
            let c = pts.len() as f64;
            [s[0] / c, s[1] / c, s[2] / c]
        })
        .collect();

    let mut counts_per_scan = vec![0usize; cloud.num_scans()];
    for &t in &scan_ids {
        counts_per_scan[t as usize] += 1;
    }

    (
        SpatioTemporalCloud {
            positions,
            scan_ids,
            counts_per_scan,
        },
        VoxelGrid {
            grid_size,
            point_to_voxel,
            voxel_coords,
        },
    )
}

/// Carries per-voxel values back to the original points.
pub fn devoxelize<T: Clone>(voxel_values: &[T], grid: &VoxelGrid) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(grid.point_to_voxel.len());
    for &v in &grid.point_to_voxel {
        let val = voxel_values.get(v).ok_or(Error::MissingVoxel {
            voxel: v,
            have: voxel_values.len(),
        })?;
        out.push(val.clone());
    }
    Ok(out)
}

/// Per-voxel label by majority vote over member points; ties go to the
/// higher class id so sparse moving points are not drowned out.
pub fn majority_vote_labels(grid: &VoxelGrid, point_labels: &[u32]) -> Result<Vec<u32>> {
    if point_labels.len() != grid.point_to_voxel.len() {
        return Err(Error::CountMismatch {
            what: "labels vs points",
            got: point_labels.len(),
            expected: grid.point_to_voxel.len(),
        });
    }
    let n = grid.num_voxels();
    let mut counts = vec![[0u32; 4]; n];
    for (&l, &v) in point_labels.iter().zip(&grid.point_to_voxel) {
        counts[v][(l as usize).min(3)] += 1;
    }
    Ok(counts
        .iter()
        .map(|c| {
            let mut best = 0u32;
            for cls in 0..4u32 {
                if c[cls as usize] >= c[best as usize] && c[cls as usize] > 0 {
                    best = cls;
                }
            }
            best
        })
        .collect())
}

/// The transform drawn by [`augment_random`], applied as rotation about z
/// first, then the mirror flips.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub yaw: f64,
    pub flip_x: bool,
    pub flip_y: bool,
}

impl Augmentation {
    pub fn draw(seed: u64) -> Augmentation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Augmentation {
            yaw: rng.random::<f64>() * std::f64::consts::TAU,
            flip_x: rng.random::<bool>(),
            flip_y: rng.random::<bool>(),
        }
    }

    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let mut x = c * p[0] - s * p[1];
        let mut y = s * p[0] + c * p[1];
        if self.flip_x {
            x = -x;
        }
        if self.flip_y {
            y = -y;
        }
        [x, y, p[2]]
    }
}

/// Random rotation about the vertical axis plus independent x/y mirror
/// flips, identical for every point so the scans stay aligned. The scan
/// index channel is untouched.
pub fn augment_random(cloud: &SpatioTemporalCloud, seed: u64) -> SpatioTemporalCloud {
    let aug = Augmentation::draw(seed);
    SpatioTemporalCloud {
        positions: cloud.positions.iter().map(|&p| aug.apply_point(p)).collect(),
        scan_ids: cloud.scan_ids.clone(),
        counts_per_scan: cloud.counts_per_scan.clone(),
    }
}
