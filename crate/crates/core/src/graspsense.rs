//! Analytic grasp detection on sampled surfaces.
//!
//! Graspness is an antipodal-feasibility score: a point is graspable when some
//! other point of the same object lies within the jaw opening on the opposite
//! side with an opposing normal. Candidates bracket such pairs. The module also
//! owns the pinhole camera used for rasters and the cue masking applied to the
//! wrist view.

use std::cmp::Ordering;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{Pose, POSE_BYTES};

#[derive(Debug, Error)]
pub enum GraspError {
    #[error("no surface points given")]
    EmptyInput,
    #[error("no antipodal pair fits within the jaw opening")]
    NoFeasibleGrasp,
    #[error("raster shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt candidate file: {0}")]
    CorruptFile(String),
}

pub type Result<T> = std::result::Result<T, GraspError>;

/// Maximum jaw opening of the gripper in meters.
pub const GRIPPER_MAX_WIDTH: f64 = 0.08;
/// Sharpness of the misalignment penalty.
pub const ALIGNMENT_SHARPNESS: f64 = 4.0;
/// Extra opening added on top of the pair distance.
pub const WIDTH_MARGIN: f64 = 0.01;
/// Default graspness threshold for the visual cue.
pub const DEFAULT_CUE_THRESHOLD: f64 = 0.2;
/// Cue masking color for `[depth, cue]` rasters.
pub const MASKED_COLOR: [f32; 2] = [0.0, 1.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub graspness: f64,
    /// Index of the object the point lies on; pairs never span objects.
    pub object: usize,
}

impl SurfacePoint {
    pub fn new(position: Vector3<f64>, normal: Vector3<f64>, object: usize) -> Self {
        SurfacePoint {
            position,
            normal: normal.normalize(),
            graspness: 0.0,
            object,
        }
    }

    pub fn transformed(&self, pose: &Pose) -> SurfacePoint {
        SurfacePoint {
            position: pose.transform_point(&self.position),
            normal: pose.rotate(&self.normal),
            ..*self
        }
    }
}

/// Gripper frame: approach along +z, fingers close along x.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspCandidate {
    pub pose: Pose,
    pub score: f64,
    pub width: f64,
    pub object: Option<usize>,
}

fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Quality of gripping `p` and `q` together, zero when infeasible.
pub fn pair_quality(p: &SurfacePoint, q: &SurfacePoint, max_width: f64, kappa: f64) -> f64 {
    let d = q.position - p.position;
    let dist = d.norm();
    if dist > max_width || dist < 1e-9 {
        return 0.0;
    }
    let opposing = (-p.normal.dot(&q.normal)).max(0.0);
    if opposing == 0.0 {
        return 0.0;
    }
    let u = d / dist;
    let misalignment = angle_between(&u, &(-p.normal)).max(angle_between(&u, &q.normal));
    (opposing * (-kappa * misalignment).exp()).clamp(0.0, 1.0)
}

fn lex_cmp(a: &Vector3<f64>, b: &Vector3<f64>) -> Ordering {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Best partner of `points[i]` on the same object; ties go to the
/// lexicographically smallest position.
fn best_partner(points: &[SurfacePoint], i: usize, max_width: f64, kappa: f64) -> Option<(usize, f64)> {
    let p = &points[i];
    let mut best: Option<(usize, f64)> = None;
    for (j, q) in points.iter().enumerate() {
        if j == i || q.object != p.object {
            continue;
        }
        let s = pair_quality(p, q, max_width, kappa);
        if s <= 0.0 {
            continue;
        }
        best = match best {
            None => Some((j, s)),
            Some((bj, bs)) => {
                if s > bs || (s == bs && lex_cmp(&q.position, &points[bj].position) == Ordering::Less) {
                    Some((j, s))
                } else {
                    Some((bj, bs))
                }
            }
        };
    }
    best
}

/// Assigns each point the quality of its best antipodal partner.
pub fn score_graspness(points: &[SurfacePoint], max_width: f64) -> Result<Vec<SurfacePoint>> {
    score_graspness_with(points, max_width, ALIGNMENT_SHARPNESS)
}

pub fn score_graspness_with(points: &[SurfacePoint], max_width: f64, kappa: f64) -> Result<Vec<SurfacePoint>> {
    if points.is_empty() {
        return Err(GraspError::EmptyInput);
    }
    Ok((0..points.len())
        .map(|i| SurfacePoint {
            graspness: best_partner(points, i, max_width, kappa).map_or(0.0, |(_, s)| s),
            ..points[i]
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub max_width: f64,
    pub kappa: f64,
    /// Anchors must exceed this graspness.
    pub min_graspness: f64,
    /// Roll offsets of the approach about the closing axis, radians.
    pub roll: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            max_width: GRIPPER_MAX_WIDTH,
            kappa: ALIGNMENT_SHARPNESS,
            min_graspness: 0.3,
            roll: 25f64.to_radians(),
        }
    }
}

/// Rotation with the given closing axis whose approach is as close as possible
/// to pointing down.
fn frame_for_axis(x: &Vector3<f64>) -> Matrix3<f64> {
    let down = Vector3::new(0.0, 0.0, -1.0);
    let mut z = down - x * x.dot(&down);
    if z.norm() < 1e-6 {
        let side = Vector3::new(0.0, 1.0, 0.0);
        z = side - x * x.dot(&side);
        if z.norm() < 1e-6 {
            z = Vector3::new(1.0, 0.0, 0.0) - x * x.x;
        }
    }
    let z = z.normalize();
    let y = z.cross(x);
    Matrix3::from_columns(&[*x, y, z])
}

/// Samples anchor points, pairs each with its best antipodal partner and emits
/// candidates centered on the pair: the nominal top-down approach, two rolled
/// variants and the mirrored closing direction of each.
pub fn detect_grasps(
    points: &[SurfacePoint],
    n_samples: usize,
    seed: u64,
    config: &DetectorConfig,
) -> Result<Vec<GraspCandidate>> {
    if points.is_empty() {
        return Err(GraspError::EmptyInput);
    }
    let eligible: Vec<usize> = (0..points.len())
        .filter(|&i| points[i].graspness > config.min_graspness)
        .collect();
    if eligible.is_empty() {
        return Err(GraspError::NoFeasibleGrasp);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..n_samples {
        let i = eligible[rng.random_range(0..eligible.len())];
        let Some((j, _)) = best_partner(points, i, config.max_width, config.kappa) else {
            continue;
        };
        let (p, q) = (&points[i], &points[j]);
        let d = q.position - p.position;
        let dist = d.norm();
        let center = (p.position + q.position) * 0.5;
        let score = (0.5 * (p.graspness + q.graspness)).clamp(0.0, 1.0);
        let width = (dist + WIDTH_MARGIN).min(config.max_width);
        let x = d / dist;
        for axis in [x, -x] {
            let base = frame_for_axis(&axis);
            for roll in [0.0, config.roll, -config.roll] {
                let r = base * Matrix3::from(nalgebra::Rotation3::from_axis_angle(&Vector3::x_axis(), roll));
                out.push(GraspCandidate {
                    pose: Pose::from_parts_unchecked(r, center).renormalized(),
                    score,
                    width,
                    object: Some(p.object),
                });
            }
        }
    }
    if out.is_empty() {
        return Err(GraspError::NoFeasibleGrasp);
    }
    Ok(out)
}

/// Pinhole camera; `extrinsics` maps camera coordinates (x right, y down,
/// z forward) to world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub extrinsics: Pose,
    pub height: usize,
    pub width: usize,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, extrinsics: Pose, height: usize, width: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GraspError::InvalidCamera(format!("focal lengths {fx}, {fy}")));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(GraspError::InvalidCamera(format!("principal point ({cx}, {cy})")));
        }
        Ok(CameraModel {
            fx,
            fy,
            cx,
            cy,
            extrinsics,
            height,
            width,
        })
    }

    /// 64×64 camera with f = 50 px centered at pixel (32, 32).
    pub fn standard(extrinsics: Pose) -> Self {
        CameraModel {
            fx: 50.0,
            fy: 50.0,
            cx: 32.0,
            cy: 32.0,
            extrinsics,
            height: 64,
            width: 64,
        }
    }

    /// Pixel `(row, col)` and depth of a world point, if in front and in bounds.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(usize, usize, f64)> {
        let c = self.extrinsics.inverse_transform_point(p);
        if c.z <= 1e-9 {
            return None;
        }
        let u = (self.fx * c.x / c.z + self.cx).round();
        let v = (self.fy * c.y / c.z + self.cy).round();
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return None;
        }
        Some((v as usize, u as usize, c.z))
    }

    /// World point at pixel `(row, col)` with camera-frame depth `depth`.
    pub fn unproject(&self, row: usize, col: usize, depth: f64) -> Vector3<f64> {
        let c = Vector3::new(
            (col as f64 - self.cx) / self.fx * depth,
            (row as f64 - self.cy) / self.fy * depth,
            depth,
        );
        self.extrinsics.transform_point(&c)
    }

    /// World-frame origin and unit direction of the ray through pixel `(row, col)`.
    pub fn ray(&self, row: usize, col: usize) -> (Vector3<f64>, Vector3<f64>) {
        let d = Vector3::new((col as f64 - self.cx) / self.fx, (row as f64 - self.cy) / self.fy, 1.0);
        (
            *self.extrinsics.translation(),
            self.extrinsics.rotate(&d.normalize()),
        )
    }

    pub fn optical_axis(&self) -> Vector3<f64> {
        self.extrinsics.axis(2)
    }
}

/// Channel-major `f32` image: `data[ch·h·w + row·w + col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Raster {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn get(&self, ch: usize, row: usize, col: usize) -> f32 {
        self.data[(ch * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, ch: usize, row: usize, col: usize, v: f32) {
        self.data[(ch * self.height + row) * self.width + col] = v;
    }

    pub fn channel(&self, ch: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[ch * n..(ch + 1) * n]
    }

    pub fn channel_mut(&mut self, ch: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[ch * n..(ch + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraspnessMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl GraspnessMap {
    pub fn empty(height: usize, width: usize) -> Self {
        GraspnessMap {
            height,
            width,
            values: vec![0.0; height * width],
            depth: vec![f64::INFINITY; height * width],
            valid: vec![false; height * width],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Z-buffered projection of scored points; equal depths keep the lower index.
pub fn project_points(points: &[SurfacePoint], cam: &CameraModel) -> GraspnessMap {
    let mut m = GraspnessMap::empty(cam.height, cam.width);
    for p in points {
        let Some((row, col, z)) = cam.project(&p.position) else {
            continue;
        };
        let k = row * cam.width + col;
        if !m.valid[k] || z < m.depth[k] - 1e-9 {
            m.valid[k] = true;
            m.depth[k] = z;
            m.values[k] = p.graspness.clamp(0.0, 1.0);
        }
    }
    m
}

/// Replaces every pixel whose graspness exceeds `tau` with `masked_color`.
pub fn apply_visual_cue(image: &Raster, m: &GraspnessMap, tau: f64, masked_color: &[f32]) -> Result<Raster> {
    if image.height != m.height || image.width != m.width {
        return Err(GraspError::ShapeMismatch(format!(
            "image {}×{}, map {}×{}",
            image.height, image.width, m.height, m.width
        )));
    }
    if masked_color.len() != image.channels {
        return Err(GraspError::ShapeMismatch(format!(
            "{} channels, mask color has {}",
            image.channels,
            masked_color.len()
        )));
    }
    let mut out = image.clone();
    for row in 0..m.height {
        for col in 0..m.width {
            if m.at(row, col) > tau {
                for (ch, &c) in masked_color.iter().enumerate() {
                    out.set(ch, row, col, c);
                }
            }
        }
    }
    Ok(out)
}

const CANDIDATE_MAGIC: &[u8; 4] = b"GCND";
const CANDIDATE_BYTES: usize = POSE_BYTES + 16;

pub fn encode_candidates(cands: &[GraspCandidate]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + cands.len() * CANDIDATE_BYTES);
    out.extend_from_slice(CANDIDATE_MAGIC);
    out.extend_from_slice(&(cands.len() as u32).to_le_bytes());
    for c in cands {
        out.extend_from_slice(&c.pose.to_bytes());
        out.extend_from_slice(&c.score.to_le_bytes());
        out.extend_from_slice(&c.width.to_le_bytes());
    }
    out
}

pub fn decode_candidates(buf: &[u8]) -> Result<Vec<GraspCandidate>> {
    if buf.len() < 8 || &buf[0..4] != CANDIDATE_MAGIC {
        return Err(GraspError::CorruptFile("bad magic".into()));
    }
    let n = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    if buf.len() != 8 + n * CANDIDATE_BYTES {
        return Err(GraspError::CorruptFile(format!(
            "{} bytes for {n} candidates",
            buf.len()
        )));
    }
    buf[8..]
        .chunks_exact(CANDIDATE_BYTES)
        .map(|rec| {
            let pose = Pose::from_bytes(&rec[..POSE_BYTES]).map_err(|e| GraspError::CorruptFile(e.to_string()))?;
            let f = |o: usize| f64::from_le_bytes(rec[o..o + 8].try_into().unwrap());
            Ok(GraspCandidate {
                pose,
                score: f(POSE_BYTES),
                width: f(POSE_BYTES + 8),
                object: None,
            })
        })
        .collect()
}

pub fn write_candidates(path: &Path, cands: &[GraspCandidate]) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode_candidates(cands))?;
    Ok(())
}

pub fn read_candidates(path: &Path) -> Result<Vec<GraspCandidate>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_candidates(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn face_grid(center: Vector3<f64>, normal: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>, half: f64, n: usize) -> Vec<SurfacePoint> {
        let mut out = Vec::new();
        for a in 0..n {
            for b in 0..n {
                let s = -half + 2.0 * half * a as f64 / (n - 1) as f64;
                let t = -half + 2.0 * half * b as f64 / (n - 1) as f64;
                out.push(SurfacePoint::new(center + u * s + v * t, normal, 0));
            }
        }
        out
    }

    #[test]
    fn opposing_faces_score_high_at_center() {
        let x = Vector3::x();
        let y = Vector3::y();
        let z = Vector3::z();
        let mut pts = face_grid(x * 0.02, x, y, z, 0.018, 5);
        pts.extend(face_grid(-x * 0.02, -x, y, z, 0.018, 5));
        let scored = score_graspness(&pts, 0.08).unwrap();
        assert!(scored[12].graspness > 0.9);
        assert!(scored[25 + 12].graspness > 0.9);
    }

    #[test]
    fn isolated_point_scores_zero() {
        let p = SurfacePoint::new(Vector3::zeros(), Vector3::z(), 0);
        assert_eq!(score_graspness(&[p], 0.08).unwrap()[0].graspness, 0.0);
        assert!(matches!(score_graspness(&[], 0.08), Err(GraspError::EmptyInput)));
    }

    #[test]
    fn candidates_bracket_pairs() {
        let x = Vector3::x();
        let mut pts = face_grid(x * 0.02, x, Vector3::y(), Vector3::z(), 0.01, 3);
        pts.extend(face_grid(-x * 0.02, -x, Vector3::y(), Vector3::z(), 0.01, 3));
        let scored = score_graspness(&pts, 0.08).unwrap();
        let c = detect_grasps(&scored, 4, 1, &DetectorConfig::default()).unwrap();
        assert_eq!(c.len(), 24);
        for g in &c {
            assert!(g.pose.axis(0).x.abs() > 1.0 - 1e-9);
            assert!((g.width - 0.05).abs() < 1e-9);
            assert!(g.score > 0.9 && g.score <= 1.0);
        }
        assert_eq!(c, detect_grasps(&scored, 4, 1, &DetectorConfig::default()).unwrap());
    }

    #[test]
    fn axis_point_projects_to_principal_point() {
        let cam = CameraModel::standard(Pose::identity());
        assert_eq!(cam.project(&Vector3::new(0.0, 0.0, 0.5)), Some((32, 32, 0.5)));
        assert_eq!(cam.project(&Vector3::new(0.0, 0.0, -0.5)), None);
    }

    #[test]
    fn z_buffer_keeps_nearer_point() {
        let cam = CameraModel::standard(Pose::identity());
        let mut near = SurfacePoint::new(Vector3::new(0.0, 0.0, 0.3), -Vector3::z(), 0);
        near.graspness = 0.7;
        let mut far = SurfacePoint::new(Vector3::new(0.0, 0.0, 0.6), -Vector3::z(), 0);
        far.graspness = 0.1;
        for pts in [[near, far], [far, near]] {
            let m = project_points(&pts, &cam);
            assert_eq!(m.at(32, 32), 0.7);
        }
    }

    #[test]
    fn cue_threshold_semantics() {
        let img = Raster::filled(2, 2, 2, 0.4);
        let mut m = GraspnessMap::empty(2, 2);
        m.values = vec![0.0, 0.2, 0.5, 0.21];
        let out = apply_visual_cue(&img, &m, 0.2, &MASKED_COLOR).unwrap();
        assert_eq!(out.get(0, 0, 0), 0.4);
        assert_eq!(out.get(0, 0, 1), 0.4);
        assert_eq!(out.get(0, 1, 0), 0.0);
        assert_eq!(out.get(1, 1, 0), 1.0);
        assert_eq!(out.get(1, 1, 1), 1.0);
        assert!(apply_visual_cue(&img, &m, 0.2, &[0.0]).is_err());
    }

    #[test]
    fn candidate_file_round_trip() {
        let c = GraspCandidate {
            pose: Pose::from_axis_angle(&Vector3::z(), 0.3, Vector3::new(0.1, 0.2, 0.03)),
            score: 0.8,
            width: 0.05,
            object: None,
        };
        let bytes = encode_candidates(&[c, c]);
        assert_eq!(&bytes[..4], b"GCND");
        assert_eq!(bytes.len(), 8 + 2 * 112);
        assert_eq!(decode_candidates(&bytes).unwrap(), vec![c, c]);
        assert!(decode_candidates(&bytes[..50]).is_err());
    }
}
