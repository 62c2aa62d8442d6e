//! Readers and writers for the on-disk scan format: binary point scans,
//! pose files, calibration files and per-point label files.
//!
//! Scans are flat little-endian `f32` records of `x y z intensity`. Poses are
//! text files with one 3x4 row-major matrix per line, expressed in the camera
//! frame; [`read_poses`] conjugates them into the sensor frame with the
//! calibration's `Tr` matrix. Labels are little-endian `u32` records whose
//! low 16 bits carry the semantic class id.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const SCAN_STRIDE: u64 = 16;
const LABEL_STRIDE: u64 = 4;

/// One LiDAR scan: sensor-frame positions plus per-point intensity.
///
/// Intensity is parsed and carried along but nothing downstream consumes it.
#[derive(Debug, Clone, PartialEq)]
pub struct RawScan {
    pub points: Vec<[f64; 3]>,
    pub intensities: Vec<f64>,
}

impl RawScan {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Column-vector 4x4 transform, row-major storage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat4 {
    pub m: [[f64; 4]; 4],
}

impl Mat4 {
    pub const IDENTITY: Mat4 = Mat4 {
        m: [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ],
    };

    /// Builds from a row-major 3x4 block, filling the last row with [0,0,0,1].
    pub fn from_3x4(rows: &[f64; 12]) -> Mat4 {
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            for c in 0..4 {
                m[r][c] = rows[r * 4 + c];
            }
        }
        m[3][3] = 1.0;
        Mat4 { m }
    }

    pub fn translation(t: [f64; 3]) -> Mat4 {
        let mut m = Mat4::IDENTITY;
        m.m[0][3] = t[0];
        m.m[1][3] = t[1];
        m.m[2][3] = t[2];
        m
    }

    pub fn mul(&self, rhs: &Mat4) -> Mat4 {
        let mut out = [[0.0; 4]; 4];
        for r in 0..4 {
            for c in 0..4 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += self.m[r][k] * rhs.m[k][c];
                }
                out[r][c] = acc;
            }
        }
        Mat4 { m: out }
    }

    pub fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for r in 0..3 {
            out[r] = self.m[r][0] * p[0] + self.m[r][1] * p[1] + self.m[r][2] * p[2] + self.m[r][3];
        }
        out
    }

    /// Inverse of an affine transform (last row [0,0,0,1]): inverts the 3x3
    /// block by adjugate and negates the carried translation.
    pub fn inv_affine(&self) -> Result<Mat4> {
        let a = &self.m;
        let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
            - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
        if det.abs() < 1e-12 {
            return Err(Error::NonRigidPose {
                msg: format!("linear block is singular (det {det:.3e})"),
            });
        }
        let inv_det = 1.0 / det;
        let mut r = [[0.0; 4]; 4];
        r[0][0] = (a[1][1] * a[2][2] - a[1][2] * a[2][1]) * inv_det;
        r[0][1] = (a[0][2] * a[2][1] - a[0][1] * a[2][2]) * inv_det;
        r[0][2] = (a[0][1] * a[1][2] - a[0][2] * a[1][1]) * inv_det;
        r[1][0] = (a[1][2] * a[2][0] - a[1][0] * a[2][2]) * inv_det;
        r[1][1] = (a[0][0] * a[2][2] - a[0][2] * a[2][0]) * inv_det;
        r[1][2] = (a[0][2] * a[1][0] - a[0][0] * a[1][2]) * inv_det;
        r[2][0] = (a[1][0] * a[2][1] - a[1][1] * a[2][0]) * inv_det;
        r[2][1] = (a[0][1] * a[2][0] - a[0][0] * a[2][1]) * inv_det;
        r[2][2] = (a[0][0] * a[1][1] - a[0][1] * a[1][0]) * inv_det;
        for row in 0..3 {
            r[row][3] = -(r[row][0] * a[0][3] + r[row][1] * a[1][3] + r[row][2] * a[2][3]);
        }
        r[3][3] = 1.0;
        Ok(Mat4 { m: r })
    }
}

const ROTATION_TOLERANCE: f64 = 1e-5;

/// A rigid transform: rotation block orthonormal with determinant +1,
/// checked at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseMatrix(Mat4);

impl PoseMatrix {
    pub const IDENTITY: PoseMatrix = PoseMatrix(Mat4::IDENTITY);

    pub fn new(m: Mat4) -> Result<PoseMatrix> {
        let deviation = rigidity_deviation(&m);
        if deviation > ROTATION_TOLERANCE {
            return Err(Error::NonOrthonormalRotation {
                deviation,
                tolerance: ROTATION_TOLERANCE,
            });
        }
        Ok(PoseMatrix(m))
    }

    pub fn from_translation(t: [f64; 3]) -> PoseMatrix {
        PoseMatrix(Mat4::translation(t))
    }

    /// Rotation by `angle` radians about the vertical (z) axis.
    pub fn from_yaw(angle: f64) -> PoseMatrix {
        let (s, c) = angle.sin_cos();
        let mut m = Mat4::IDENTITY;
        m.m[0][0] = c;
        m.m[0][1] = -s;
        m.m[1][0] = s;
        m.m[1][1] = c;
        PoseMatrix(m)
    }

    pub fn matrix(&self) -> &Mat4 {
        &self.0
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.0.m[0][3], self.0.m[1][3], self.0.m[2][3]]
    }

    pub fn compose(&self, rhs: &PoseMatrix) -> PoseMatrix {
        PoseMatrix(self.0.mul(&rhs.0))
    }

    /// Rigid inverse: transpose the rotation, negate the rotated translation.
    pub fn inverse(&self) -> PoseMatrix {
        let a = &self.0.m;
        let mut r = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = a[j][i];
            }
        }
        for i in 0..3 {
            r[i][3] = -(r[i][0] * a[0][3] + r[i][1] * a[1][3] + r[i][2] * a[2][3]);
        }
        r[3][3] = 1.0;
        PoseMatrix(Mat4 { m: r })
    }

    pub fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        self.0.transform_point(p)
    }
}

/// Max deviation of R'R from identity plus the determinant's distance from +1.
fn rigidity_deviation(m: &Mat4) -> f64 {
    let a = &m.m;
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let mut dot = 0.0;
            for k in 0..3 {
                dot += a[k][i] * a[k][j];
            }
            let expect = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - expect).abs());
        }
    }
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    worst.max((det - 1.0).abs())
}

/// Sensor-to-camera calibration (the `Tr:` line of a calib file).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub tr: Mat4,
}

impl Calibration {
    pub const IDENTITY: Calibration = Calibration { tr: Mat4::IDENTITY };
}

pub fn read_scan(path: &Path) -> Result<RawScan> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let len = bytes.len() as u64;
    if !len.is_multiple_of(SCAN_STRIDE) {
        return Err(Error::TruncatedRecord {
            path: path.to_path_buf(),
            len,
            stride: SCAN_STRIDE,
        });
    }
    let n = bytes.len() / SCAN_STRIDE as usize;
    let mut points = Vec::with_capacity(n);
    let mut intensities = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(SCAN_STRIDE as usize).enumerate() {
        let f = |o: usize| f32::from_le_bytes([rec[o], rec[o + 1], rec[o + 2], rec[o + 3]]) as f64;
        let (x, y, z, w) = (f(0), f(4), f(8), f(12));
        if !(x.is_finite() && y.is_finite() && z.is_finite() && w.is_finite()) {
            return Err(Error::NonFiniteValue {
                context: format!("record {i} of {}", path.display()),
            });
        }
        points.push([x, y, z]);
        intensities.push(w);
    }
    Ok(RawScan { points, intensities })
}

pub fn write_scan(path: &Path, scan: &RawScan) -> Result<()> {
    let mut bytes = Vec::with_capacity(scan.len() * SCAN_STRIDE as usize);
    for (p, &w) in scan.points.iter().zip(&scan.intensities) {
        for v in [p[0], p[1], p[2], w] {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a pose file and conjugates every pose into the sensor frame:
/// `P_sensor = Tr^-1 * P_cam * Tr`.
pub fn read_poses(path: &Path, calib: &Calibration) -> Result<Vec<PoseMatrix>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let tr = calib.tr;
    let tr_inv = tr.inv_affine()?;
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut vals = [0.0f64; 12];
        let mut count = 0;
        for (i, tok) in line.split_whitespace().enumerate() {
            if i >= 12 {
                count = 13;
                break;
            }
            vals[i] = tok.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("bad float {tok:?}"),
            })?;
            count = i + 1;
        }
        if count != 12 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: "expected 12 values per pose line".to_string(),
            });
        }
        let cam = Mat4::from_3x4(&vals);
        let sensor = tr_inv.mul(&cam).mul(&tr);
        poses.push(PoseMatrix::new(sensor)?);
    }
    Ok(poses)
}

/// Writes poses back in the camera frame (inverse of the [`read_poses`]
/// conjugation), 12 values per line.
pub fn write_poses(path: &Path, poses: &[PoseMatrix], calib: &Calibration) -> Result<()> {
    let tr = calib.tr;
    let tr_inv = tr.inv_affine()?;
    let mut out = String::new();
    for pose in poses {
        let cam = tr.mul(pose.matrix()).mul(&tr_inv);
        let mut first = true;
        for r in 0..3 {
            for c in 0..4 {
                if !first {
                    out.push(' ');
                }
                out.push_str(&format!("{:.12e}", cam.m[r][c]));
                first = false;
            }
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_calib(path: &Path) -> Result<Calibration> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for (lineno, line) in text.lines().enumerate() {
        let Some(rest) = line.strip_prefix("Tr:") else {
            continue;
        };
        let mut vals = [0.0f64; 12];
        let toks: Vec<&str> = rest.split_whitespace().collect();
        if toks.len() != 12 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("Tr line has {} values, expected 12", toks.len()),
            });
        }
        for (i, tok) in toks.iter().enumerate() {
            vals[i] = tok.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("bad float {tok:?}"),
            })?;
        }
        return Ok(Calibration {
            tr: Mat4::from_3x4(&vals),
        });
    }
    Err(Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: "no Tr: line".into(),
    })
}

pub fn write_calib(path: &Path, calib: &Calibration) -> Result<()> {
    let mut out = String::from("Tr:");
    for r in 0..3 {
        for c in 0..4 {
            out.push_str(&format!(" {:.12e}", calib.tr.m[r][c]));
        }
    }
    out.push('\n');
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a label file; each record's low 16 bits are the semantic id, the
/// high bits (instance id) are dropped.
pub fn read_labels(path: &Path) -> Result<Vec<u32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let len = bytes.len() as u64;
    if !len.is_multiple_of(LABEL_STRIDE) {
        return Err(Error::TruncatedRecord {
            path: path.to_path_buf(),
            len,
            stride: LABEL_STRIDE,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) & 0xFFFF)
        .collect())
}

/// Writes predictions in the label file encoding. Values must fit the
/// 16-bit semantic field.
pub fn write_predictions(path: &Path, labels: &[u32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(labels.len() * 4);
    for &v in labels {
        if v > 0xFFFF {
            return Err(Error::LabelOutOfRange { value: v });
        }
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Class ids used throughout: 0 unlabeled (ignored), 1 static, 2 moving,
/// 3 movable. Raw ids absent from the table fall back to static.
pub mod class {
    pub const UNLABELED: u32 = 0;
    pub const STATIC: u32 = 1;
    pub const MOVING: u32 = 2;
    pub const MOVABLE: u32 = 3;
    pub const MAX: u32 = 3;
}

/// Raw-id to class-id table, loaded from a `raw = class` text file.
#[derive(Debug, Clone)]
pub struct LabelMap {
    map: std::collections::HashMap<u32, u32>,
    default: u32,
}

impl LabelMap {
    /// Parses lines of the form `raw_id = class_id`; `#` starts a comment.
    /// A `default = class_id` line overrides the fallback class.
    pub fn from_file(path: &Path) -> Result<LabelMap> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut map = std::collections::HashMap::new();
        let mut default = class::STATIC;
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = raw_line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `key = value`, got {line:?}")))?;
            let v: u32 = v
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad class id {:?}", v.trim())))?;
            if v > class::MAX {
                return Err(bad(format!("class id {v} out of range 0..={}", class::MAX)));
            }
            let k = k.trim();
            if k == "default" {
                default = v;
            } else {
                let k: u32 = k
                    .parse()
                    .map_err(|_| bad(format!("bad raw id {k:?}")))?;
                map.insert(k, v);
            }
        }
        Ok(LabelMap { map, default })
    }

    pub fn from_pairs(pairs: &[(u32, u32)], default: u32) -> LabelMap {
        LabelMap {
            map: pairs.iter().copied().collect(),
            default,
        }
    }

    pub fn remap(&self, raw: u32) -> u32 {
        self.map.get(&raw).copied().unwrap_or(self.default)
    }
}

pub fn remap_labels(labels: &[u32], map: &LabelMap) -> Vec<u32> {
    labels.iter().map(|&l| map.remap(l)).collect()
}

/// A sequence directory: `velodyne/NNNNNN.bin`, `labels/NNNNNN.label`,
/// `poses.txt`, `calib.txt`.
#[derive(Debug, Clone)]
pub struct SequenceDir {
    pub root: PathBuf,
}

impl SequenceDir {
    pub fn new(root: impl Into<PathBuf>) -> SequenceDir {
        SequenceDir { root: root.into() }
    }

    pub fn scan_path(&self, idx: usize) -> PathBuf {
        self.root.join("velodyne").join(format!("{idx:06}.bin"))
    }

    pub fn label_path(&self, idx: usize) -> PathBuf {
        self.root.join("labels").join(format!("{idx:06}.label"))
    }

    pub fn poses_path(&self) -> PathBuf {
        self.root.join("poses.txt")
    }

    pub fn calib_path(&self) -> PathBuf {
        self.root.join("calib.txt")
    }

    pub fn scan_count(&self) -> Result<usize> {
        let dir = self.root.join("velodyne");
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut n = 0;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            if entry.path().extension().is_some_and(|e| e == "bin") {
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn read_calib(&self) -> Result<Calibration> {
        read_calib(&self.calib_path())
    }

    pub fn read_poses(&self) -> Result<Vec<PoseMatrix>> {
        read_poses(&self.poses_path(), &self.read_calib()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn scan_with_partial_record_is_rejected() {
        let dir = tmp();
        let p = dir.path().join("bad.bin");
        fs::write(&p, vec![0u8; 17]).unwrap();
        match read_scan(&p) {
            Err(Error::TruncatedRecord { len: 17, stride: 16, .. }) => {}
            other => panic!("expected TruncatedRecord, got {other:?}"),
        }
    }

    #[test]
    fn scan_with_nan_is_rejected() {
        let dir = tmp();
        let p = dir.path().join("nan.bin");
        let mut bytes = Vec::new();
        for v in [f32::NAN, 0.0, 0.0, 0.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_scan(&p), Err(Error::NonFiniteValue { .. })));
    }

    #[test]
    fn missing_scan_reports_not_found() {
        let dir = tmp();
        assert!(matches!(
            read_scan(&dir.path().join("nope.bin")),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn scan_round_trip_is_identity() {
        let dir = tmp();
        let p = dir.path().join("s.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // f32-representable payload so the round trip is exact
        let points: Vec<[f64; 3]> = (0..257)
            .map(|_| {
                [
                    rng.random::<f32>() as f64 * 100.0_f32 as f64,
                    rng.random::<f32>() as f64,
                    rng.random::<f32>() as f64,
                ]
            })
            .map(|p| [p[0] as f32 as f64, p[1] as f32 as f64, p[2] as f32 as f64])
            .collect();
        let intensities: Vec<f64> = (0..257).map(|_| rng.random::<f32>() as f64).collect();
        let scan = RawScan {
            points,
            intensities,
        };
        write_scan(&p, &scan).unwrap();
        assert_eq!(read_scan(&p).unwrap(), scan);
    }

    #[test]
    fn labels_keep_low_16_bits() {
        let dir = tmp();
        let p = dir.path().join("l.label");
        let mut bytes = Vec::new();
        // 0x0001_0009: instance 1, semantic 9. 0x0000_00FB: semantic 251.
        bytes.extend_from_slice(&0x0001_0009u32.to_le_bytes());
        bytes.extend_from_slice(&0x0000_00FBu32.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        assert_eq!(read_labels(&p).unwrap(), vec![9, 251]);
    }

    #[test]
    fn oversized_prediction_is_rejected() {
        let dir = tmp();
        let p = dir.path().join("p.label");
        match write_predictions(&p, &[65536]) {
            Err(Error::LabelOutOfRange { value: 65536 }) => {}
            other => panic!("expected LabelOutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn label_round_trip_is_identity() {
        let dir = tmp();
        let p = dir.path().join("rt.label");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels: Vec<u32> = (0..1000).map(|_| rng.random_range(0..=0xFFFF)).collect();
        write_predictions(&p, &labels).unwrap();
        assert_eq!(read_labels(&p).unwrap(), labels);
    }

    #[test]
    fn pose_line_under_identity_calib() {
        let dir = tmp();
        let p = dir.path().join("poses.txt");
        fs::write(&p, "1 0 0 5 0 1 0 0 0 0 1 0\n").unwrap();
        let poses = read_poses(&p, &Calibration::IDENTITY).unwrap();
        assert_eq!(poses.len(), 1);
        assert_eq!(poses[0].translation(), [5.0, 0.0, 0.0]);
    }

    #[test]
    fn non_orthonormal_pose_is_rejected() {
        let dir = tmp();
        let p = dir.path().join("poses.txt");
        fs::write(&p, "2 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        assert!(matches!(
            read_poses(&p, &Calibration::IDENTITY),
            Err(Error::NonOrthonormalRotation { .. })
        ));
    }

    #[test]
    fn pose_read_applies_calibration_conjugation() {
        // Tr rotates the sensor frame 90 degrees about z. For a camera-frame
        // translation by (1,0,0) the sensor-frame pose must be
        // Tr^-1 * T * Tr, whose translation is Tr^-1 * (1,0,0).
        let dir = tmp();
        let cp = dir.path().join("calib.txt");
        fs::write(&cp, "Tr: 0 -1 0 0 1 0 0 0 0 0 1 0\n").unwrap();
        let calib = read_calib(&cp).unwrap();
        let pp = dir.path().join("poses.txt");
        fs::write(&pp, "1 0 0 1 0 1 0 0 0 0 1 0\n").unwrap();
        let poses = read_poses(&pp, &calib).unwrap();
        let t = poses[0].translation();
        // Tr^-1 rotates (1,0,0) by -90 degrees about z: (0,-1,0).
        assert!((t[0] - 0.0).abs() < 1e-12 && (t[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pose_round_trip_under_nontrivial_calib() {
        let dir = tmp();
        let cp = dir.path().join("calib.txt");
        fs::write(&cp, "Tr: 0 -1 0 0.3 1 0 0 -0.1 0 0 1 0.2\n").unwrap();
        let calib = read_calib(&cp).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let poses: Vec<PoseMatrix> = (0..20)
            .map(|_| {
                let yaw = rng.random::<f64>() * std::f64::consts::TAU;
                PoseMatrix::from_translation([
                    rng.random::<f64>() * 10.0,
                    rng.random::<f64>() * 10.0,
                    rng.random::<f64>(),
                ])
                .compose(&PoseMatrix::from_yaw(yaw))
            })
            .collect();

        let pp = dir.path().join("poses.txt");
        write_poses(&pp, &poses, &calib).unwrap();
        let back = read_poses(&pp, &calib).unwrap();
        assert_eq!(back.len(), poses.len());
        for (a, b) in poses.iter().zip(&back) {
            for r in 0..4 {
                for c in 0..4 {
                    assert!(
                        (a.matrix().m[r][c] - b.matrix().m[r][c]).abs() < 1e-9,
                        "pose mismatch at ({r},{c})"
                    );
                }
            }
        }
    }

    #[test]
    fn pose_inverse_composes_to_identity() {
        let p = PoseMatrix::from_translation([1.0, -2.0, 0.5]).compose(&PoseMatrix::from_yaw(0.7));
        let id = p.compose(&p.inverse());
        for r in 0..4 {
            for c in 0..4 {
                let expect = if r == c { 1.0 } else { 0.0 };
                assert!((id.matrix().m[r][c] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn remap_uses_table_and_falls_back_to_static() {
        let dir = tmp();
        let p = dir.path().join("labels.cfg");
        fs::write(&p, "# two-class scheme\n9 = 1\n251 = 2\n0 = 0\n").unwrap();
        let map = LabelMap::from_file(&p).unwrap();
        assert_eq!(remap_labels(&[9, 251, 0, 77], &map), vec![1, 2, 0, 1]);
    }

    #[test]
    fn remap_rejects_out_of_range_class() {
        let dir = tmp();
        let p = dir.path().join("labels.cfg");
        fs::write(&p, "9 = 4\n").unwrap();
        assert!(matches!(LabelMap::from_file(&p), Err(Error::Parse { .. })));
    }
}
