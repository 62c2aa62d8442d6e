//! Deterministic synthetic LiDAR sequences with oracle motion labels.
//!
//! A scene is a flat ground patch plus axis-aligned boxes, some static and
//! some moving at a constant velocity per scan, observed by an ego sensor
//! that itself advances between scans. Surface points are sampled once per
//! scene (noise included), then rigidly displaced per scan, so a moving
//! box's points correspond one-to-one across scans and translate by exactly
//! its velocity. Scans are written in the same on-disk layout real
//! sequences use, so the rest of the pipeline runs on them unchanged.
//!
//! There is no occlusion or beam model; points are surface samples. That is
//! a deliberate simplification: folding several scans into one cloud makes
//! movers leave spatial trails while static structure stays put, which is
//! the phenomenon the segmentation model feeds on.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kitti_io::{
    class, write_calib, write_poses, write_predictions, write_scan, Calibration, PoseMatrix,
    RawScan, SequenceDir,
};

/// An axis-aligned box with a per-scan velocity (zero for static boxes).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxSpec {
    pub center: [f64; 3],
    pub size: [f64; 3],
    /// Meters of displacement per scan.
    pub velocity: [f64; 3],
}

impl BoxSpec {
    pub fn still(center: [f64; 3], size: [f64; 3]) -> BoxSpec {
        BoxSpec {
            center,
            size,
            velocity: [0.0; 3],
        }
    }

    pub fn moving(center: [f64; 3], size: [f64; 3], velocity: [f64; 3]) -> BoxSpec {
        BoxSpec {
            center,
            size,
            velocity,
        }
    }
}

/// Everything that defines one synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    /// Side length of the square ground patch at z = 0, centered on the
    /// scene origin.
    pub ground_extent: f64,
    /// Ground points per square meter.
    pub ground_density: f64,
    /// Box-surface points per square meter of face area.
    pub box_density: f64,
    pub static_boxes: Vec<BoxSpec>,
    pub moving_boxes: Vec<BoxSpec>,
    /// Ego translation per scan; poses record it, scans are expressed in
    /// the ego frame of their own instant.
    pub ego_velocity: [f64; 3],
    /// Std-dev of the Gaussian surface roughness, drawn once per point.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Error::Config {
            path: "scene spec".into(),
            msg,
        };
        if !(self.ground_extent > 0.0) || !(self.ground_density > 0.0) {
            return Err(bad("ground extent and density must be positive".into()));
        }
        if !(self.box_density > 0.0) {
            return Err(bad("box density must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(bad("noise sigma must be non-negative".into()));
        }
        for b in self.static_boxes.iter().chain(&self.moving_boxes) {
            if b.size.iter().any(|&s| !(s > 0.0)) {
                return Err(bad(format!("degenerate box of size {:?}", b.size)));
            }
        }
        Ok(())
    }
}

/// Scans in chronological order with matching poses and per-scan labels.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub scans: Vec<RawScan>,
    pub poses: Vec<PoseMatrix>,
    pub labels: Vec<Vec<u32>>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

fn sample_ground(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let n = ((spec.ground_extent * spec.ground_extent * spec.ground_density).ceil() as usize)
        .max(1);
    let half = spec.ground_extent / 2.0;
    (0..n)
        .map(|_| {
            [
                rng.random_range(-half..half),
                rng.random_range(-half..half),
                0.0,
            ]
        })
        .collect()
}

fn sample_box(b: &BoxSpec, density: f64, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let h = [b.size[0] / 2.0, b.size[1] / 2.0, b.size[2] / 2.0];
    let mut points = Vec::new();
    // Fixed axis per face: (normal axis, sign), the other two axes sampled.
    for axis in 0..3 {
        let (u, v) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let area = b.size[u] * b.size[v];
        let n = ((area * density).ceil() as usize).max(1);
        for sign in [-1.0, 1.0] {
            for _ in 0..n {
                let mut p = b.center;
                p[axis] += sign * h[axis];
                p[u] += rng.random_range(-h[u]..h[u]);
                p[v] += rng.random_range(-h[v]..h[v]);
                points.push(p);
            }
        }
    }
    points
}

/// Generates `f` scans. Each scan `s` sees every moving box displaced by
/// `s * velocity` and is expressed in the ego frame translated by
/// `s * ego_velocity`; the emitted pose of scan `s` maps it back to the
/// frame of scan 0. Point noise is drawn once, so inter-scan displacement
/// of any point is exact rigid motion.
pub fn generate_sequence(spec: &SceneSpec, f: usize) -> Result<SyntheticSequence> {
    spec.validate()?;
    if f == 0 {
        return Err(Error::Config {
            path: "scene spec".into(),
            msg: "need at least one scan".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut base: Vec<[f64; 3]> = Vec::new();
    let mut velocity: Vec<[f64; 3]> = Vec::new();
    let mut label: Vec<u32> = Vec::new();

    for p in sample_ground(spec, &mut rng) {
        base.push(p);
        velocity.push([0.0; 3]);
        label.push(class::STATIC);
    }
    for b in &spec.static_boxes {
        for p in sample_box(b, spec.box_density, &mut rng) {
            base.push(p);
            velocity.push([0.0; 3]);
            label.push(class::STATIC);
        }
    }
    for b in &spec.moving_boxes {
        for p in sample_box(b, spec.box_density, &mut rng) {
            base.push(p);
            velocity.push(b.velocity);
            label.push(class::MOVING);
        }
    }
    if spec.noise_sigma > 0.0 {
        for p in &mut base {
            for a in 0..3 {
                p[a] += spec.noise_sigma * gaussian(&mut rng);
            }
        }
    }

    let mut scans = Vec::with_capacity(f);
    let mut poses = Vec::with_capacity(f);
    let mut labels = Vec::with_capacity(f);
    for s in 0..f {
        let sf = s as f64;
        let ego = [
            sf * spec.ego_velocity[0],
            sf * spec.ego_velocity[1],
            sf * spec.ego_velocity[2],
        ];
        let pose = PoseMatrix::from_translation(ego);
        let inv = pose.inverse();
        let points: Vec<[f64; 3]> = base
            .iter()
            .zip(&velocity)
            .map(|(p, v)| {
                let world = [p[0] + sf * v[0], p[1] + sf * v[1], p[2] + sf * v[2]];
                inv.transform_point(world)
            })
            .collect();
        let n = points.len();
        scans.push(RawScan {
            points,
            intensities: vec![0.0; n],
        });
        poses.push(pose);
        labels.push(label.clone());
    }
    Ok(SyntheticSequence {
        scans,
        poses,
        labels,
    })
}

/// Writes the sequence in the standard directory layout: `velodyne/*.bin`,
/// `labels/*.label`, `poses.txt`, `calib.txt` (identity calibration).
/// Labels are already class ids, so no remap table is needed to read them.
pub fn write_sequence(dir: &SequenceDir, seq: &SyntheticSequence) -> Result<()> {
    let velo = dir.root.join("velodyne");
    let lab = dir.root.join("labels");
    fs::create_dir_all(&velo).map_err(|e| Error::io(&velo, e))?;
    fs::create_dir_all(&lab).map_err(|e| Error::io(&lab, e))?;
    write_calib(&dir.calib_path(), &Calibration::IDENTITY)?;
    write_poses(&dir.poses_path(), &seq.poses, &Calibration::IDENTITY)?;
    for (i, scan) in seq.scans.iter().enumerate() {
        write_scan(&dir.scan_path(i), scan)?;
        write_predictions(&dir.label_path(i), &seq.labels[i])?;
    }
    Ok(())
}

/// Generates and writes `count` scenes of a suite under
/// `root/scenes/NNN/`, each `f` scans long, returning the scene roots.
pub fn write_suite(root: &Path, specs: &[SceneSpec], f: usize) -> Result<Vec<SequenceDir>> {
    let mut dirs = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let dir = SequenceDir::new(root.join(format!("{i:03}")));
        write_sequence(&dir, &generate_sequence(spec, f)?)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

fn polar(r: f64, angle: f64, z: f64) -> [f64; 3] {
    [r * angle.cos(), r * angle.sin(), z]
}

fn easy_spec(i: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(0xEA51 + i);
    let mover_angle = rng.random_range(0.0..TAU);
    let mover_r = rng.random_range(3.5..6.0);
    let dir = rng.random_range(0.0..TAU);
    let speed = rng.random_range(0.5..0.8);
    SceneSpec {
        ground_extent: 16.0,
        ground_density: 0.6,
        box_density: 2.5,
        static_boxes: vec![
            BoxSpec::still(
                polar(rng.random_range(3.0..6.5), rng.random_range(0.0..TAU), 1.0),
                [2.0, 2.0, 2.0],
            ),
            BoxSpec::still(
                polar(rng.random_range(3.0..6.5), rng.random_range(0.0..TAU), 0.75),
                [1.5, 1.5, 1.5],
            ),
        ],
        moving_boxes: vec![BoxSpec::moving(
            polar(mover_r, mover_angle, 0.8),
            [1.8, 1.0, 1.4],
            [speed * dir.cos(), speed * dir.sin(), 0.0],
        )],
        ego_velocity: [0.25, 0.0, 0.0],
        noise_sigma: 0.01,
        seed: 0x5EED_0000 + i,
    }
}

fn ranges_spec(i: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7A2E + i);
    let mut mover = |r: f64| {
        let angle = rng.random_range(-0.5..0.5);
        let dir: f64 = rng.random_range(0.0..TAU);
        let speed = rng.random_range(0.9..1.2);
        BoxSpec::moving(
            polar(r, angle, 1.0),
            [2.5, 1.6, 2.0],
            [speed * dir.cos(), speed * dir.sin(), 0.0],
        )
    };
    // One mover per range bin: close, medium, far.
    let movers = vec![mover(10.0), mover(30.0), mover(60.0)];
    SceneSpec {
        ground_extent: 130.0,
        ground_density: 0.02,
        box_density: 5.0,
        static_boxes: vec![
            BoxSpec::still(polar(15.0, 1.2, 1.0), [2.0, 2.0, 2.0]),
            BoxSpec::still(polar(40.0, -1.0, 1.0), [3.0, 2.0, 2.0]),
        ],
        moving_boxes: movers,
        ego_velocity: [0.3, 0.0, 0.0],
        noise_sigma: 0.01,
        seed: 0x5EED_1000 + i,
    }
}

fn crowded_spec(i: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC20D + i);
    let mut boxes = |n: usize, moving: bool| -> Vec<BoxSpec> {
        (0..n)
            .map(|_| {
                let c = polar(
                    rng.random_range(3.0..10.0),
                    rng.random_range(0.0..TAU),
                    rng.random_range(0.6..1.2),
                );
                let size = [
                    rng.random_range(1.0..2.5),
                    rng.random_range(1.0..2.5),
                    rng.random_range(1.0..2.0),
                ];
                if moving {
                    let dir: f64 = rng.random_range(0.0..TAU);
                    let speed = rng.random_range(0.4..0.9);
                    BoxSpec::moving(c, size, [speed * dir.cos(), speed * dir.sin(), 0.0])
                } else {
                    BoxSpec::still(c, size)
                }
            })
            .collect()
    };
    SceneSpec {
        ground_extent: 24.0,
        ground_density: 0.5,
        box_density: 2.0,
        static_boxes: boxes(6, false),
        moving_boxes: boxes(5, true),
        ego_velocity: [0.35, 0.1, 0.0],
        noise_sigma: 0.01,
        seed: 0x5EED_2000 + i,
    }
}

/// Curated scene lists: `easy` (one mover, two static boxes), `ranges`
/// (movers at 10/30/60 m, one per distance bin), `crowded` (five movers
/// among six static boxes).
pub fn scene_suite(name: &str) -> Result<Vec<SceneSpec>> {
    match name {
        "easy" => Ok((0..14).map(easy_spec).collect()),
        "ranges" => Ok((0..8).map(ranges_spec).collect()),
        "crowded" => Ok((0..6).map(crowded_spec).collect()),
        other => Err(Error::UnknownSuite(other.to_string())),
    }
}
