//! Synthetic demonstrations: pick a target grasp on a randomly placed object,
//! plan an interpolated approach and lift, run it in the simulator and keep
//! the successful runs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::action_vae::{ActionChunk, ChunkSample, ACTION_DIM};
use crate::geometry::{interpolate_pose, rotation_distance, Pose, POSE_BYTES};
use crate::graspsense::{detect_grasps, DetectorConfig, GraspCandidate, GraspError, Raster};
use crate::hps::{grasp_nms, SelectorConfig};
use crate::latent_diffusion::{Observation, WindowSource};
use crate::netcore::step_seed;
use crate::simworld::{home_pose, Frame, SimError, Suite, World, MAX_STEP_ROTATION};

pub const PRE_GRASP_OFFSET: f64 = 0.08;
pub const LIFT_HEIGHT: f64 = 0.12;
pub const STEP_LENGTH: f64 = 0.02;
pub const CLOSE_HOLD_STEPS: usize = 2;
/// Targets further than this from the home orientation are not demonstrated.
pub const MAX_TARGET_ROTATION: f64 = std::f64::consts::FRAC_PI_2;
const ATTEMPTS_PER_EPISODE: u64 = 5;
const EPISODE_MAGIC: &[u8; 4] = b"GEPD";
const EPISODE_VERSION: u32 = 1;
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no feasible grasp on the object")]
    NoFeasibleGrasp,
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

impl From<GraspError> for DataError {
    fn from(e: GraspError) -> Self {
        match e {
            GraspError::NoFeasibleGrasp | GraspError::EmptyInput => DataError::NoFeasibleGrasp,
            other => DataError::CorruptFile(other.to_string()),
        }
    }
}

/// One successful demonstration. `frames[t]` is what was observed before `actions[t]` ran.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub frames: Vec<Frame>,
    pub actions: Vec<[f64; ACTION_DIM]>,
    pub target: GraspCandidate,
    pub grasp_frame_index: Option<usize>,
    pub success: bool,
    pub object: usize,
    pub catalog_id: Option<usize>,
    pub seed: u64,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Detected candidates on one object after duplicate suppression.
pub fn sample_targets(points: &[crate::graspsense::SurfacePoint], n: usize, seed: u64) -> Result<Vec<GraspCandidate>> {
    let cands = detect_grasps(points, n, seed, &DetectorConfig::default())?;
    let kept = grasp_nms(&cands, &SelectorConfig::default());
    if kept.is_empty() {
        return Err(DataError::NoFeasibleGrasp);
    }
    Ok(kept)
}

/// Pose backed off along the approach axis of `grasp`.
pub fn pre_grasp(grasp: &Pose, offset: f64) -> Pose {
    let t = grasp.translation() - grasp.axis(2) * offset;
    Pose::from_parts_unchecked(*grasp.rotation(), t)
}

/// `steps` poses from `start` through the pre-grasp to `grasp`. Rotation
/// reaches the grasp orientation at the pre-grasp and stays there; with two
/// steps only the endpoints remain.
pub fn synthesize_trajectory(start: &Pose, grasp: &Pose, steps: usize) -> Result<Vec<Pose>> {
    if steps < 2 {
        return Err(DataError::BadConfig("a trajectory needs at least 2 poses".into()));
    }
    if steps == 2 {
        return Ok(vec![*start, *grasp]);
    }
    let pre = pre_grasp(grasp, PRE_GRASP_OFFSET);
    let l1 = (pre.translation() - start.translation()).norm();
    let l2 = PRE_GRASP_OFFSET;
    let intervals = steps - 1;
    let n1 = ((intervals as f64 * l1 / (l1 + l2)).round() as usize).clamp(1, intervals - 1);
    let n2 = intervals - n1;
    let mut out = Vec::with_capacity(steps);
    for i in 0..=n1 {
        out.push(interpolate(start, &pre, i as f64 / n1 as f64));
    }
    for i in 1..=n2 {
        out.push(interpolate(&pre, grasp, i as f64 / n2 as f64));
    }
    if let Some(last) = out.last_mut() {
        *last = *grasp;
    }
    Ok(out)
}

fn interpolate(a: &Pose, b: &Pose, t: f64) -> Pose {
    interpolate_pose(a, b, t.clamp(0.0, 1.0)).expect("parameter clamped to [0, 1]")
}

/// Same number of poses, redistributed at equal translational arc length
/// along the polyline through `traj`; rotation follows the polyline
/// parameter. A path without translation is spaced by rotation angle instead.
pub fn debias_speed(traj: &[Pose]) -> Vec<Pose> {
    resample_uniform(traj, traj.len())
}

/// `n` poses at equal arc length along `traj`, endpoints kept.
pub fn resample_uniform(traj: &[Pose], n: usize) -> Vec<Pose> {
    if traj.len() < 2 || n < 2 {
        return traj.to_vec();
    }
    let mut seg: Vec<f64> = traj
        .windows(2)
        .map(|w| (w[1].translation() - w[0].translation()).norm())
        .collect();
    if seg.iter().sum::<f64>() < 1e-12 {
        seg = traj.windows(2).map(|w| rotation_distance(w[0].rotation(), w[1].rotation())).collect();
    }
    let total: f64 = seg.iter().sum();
    if total < 1e-12 {
        return (0..n).map(|i| traj[(i * (traj.len() - 1)) / (n - 1)]).collect();
    }
    let mut cum = Vec::with_capacity(traj.len());
    cum.push(0.0);
    for s in &seg {
        cum.push(cum.last().unwrap() + s);
    }
    let mut out = Vec::with_capacity(n);
    let mut j = 0;
    for i in 0..n {
        if i == 0 {
            out.push(traj[0]);
            continue;
        }
        if i == n - 1 {
            out.push(*traj.last().unwrap());
            continue;
        }
        let s = total * i as f64 / (n - 1) as f64;
        while j + 1 < seg.len() && cum[j + 1] < s {
            j += 1;
        }
        let t = if seg[j] > 0.0 { (s - cum[j]) / seg[j] } else { 0.0 };
        out.push(interpolate(&traj[j], &traj[j + 1], t));
    }
    out
}

fn max_rotation_step(traj: &[Pose]) -> f64 {
    traj.windows(2)
        .map(|w| rotation_distance(w[0].rotation(), w[1].rotation()))
        .fold(0.0, f64::max)
}

/// Rounds through `f32`, the precision actions are stored at.
fn storable(a: [f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
    a.map(|v| v as f32 as f64)
}

fn action(p: &Pose, open: bool) -> [f64; ACTION_DIM] {
    let mut a = [0.0; ACTION_DIM];
    a[..9].copy_from_slice(&p.to_vec9());
    a[9] = if open { 1.0 } else { 0.0 };
    storable(a)
}

/// Full demonstration: approach, close, lift, all moving steps at one speed.
/// The approach is split into equal steps of at most [`STEP_LENGTH`] and
/// [`MAX_STEP_ROTATION`]; the lift reuses that step length and rises at
/// least [`LIFT_HEIGHT`].
pub fn plan_demo(start: &Pose, grasp: &Pose) -> Result<Vec<[f64; ACTION_DIM]>> {
    let dense = synthesize_trajectory(start, grasp, 64)?;
    let length: f64 = dense.windows(2).map(|w| (w[1].translation() - w[0].translation()).norm()).sum();
    let mut n = ((length / STEP_LENGTH).ceil() as usize).max(1) + 1;
    let mut approach = resample_uniform(&dense, n);
    while max_rotation_step(&approach) > MAX_STEP_ROTATION + 1e-9 {
        n += 1;
        approach = resample_uniform(&dense, n);
    }
    let step = if length > 1e-9 { length / (n - 1) as f64 } else { STEP_LENGTH };
    let mut out: Vec<_> = approach.iter().skip(1).map(|p| action(p, true)).collect();
    out.extend(std::iter::repeat_n(action(grasp, false), CLOSE_HOLD_STEPS));
    let lift_steps = (LIFT_HEIGHT / step - 1e-9).ceil() as usize;
    for i in 1..=lift_steps {
        let mut p = *grasp;
        let mut t = *grasp.translation();
        t.z += step * i as f64;
        p.set_translation(t);
        out.push(action(&p, false));
    }
    Ok(out)
}

/// Outcome of executing a planned demonstration.
#[derive(Debug, Clone, PartialEq)]
pub enum Rollout {
    Success(Box<Episode>),
    Rejected { steps: usize, collided: bool },
}

/// Runs `actions` from the world's current state, recording an observation
/// before every step. Only a lifted object yields an episode.
pub fn roll_and_record(world: &mut World, actions: &[[f64; ACTION_DIM]], target: &GraspCandidate, seed: u64) -> Result<Rollout> {
    let mut frames = Vec::with_capacity(actions.len());
    let mut done_actions = Vec::with_capacity(actions.len());
    let mut grasp_frame_index = None;
    let mut collided = false;
    for a in actions {
        if world.is_done() {
            break;
        }
        frames.push(world.observe());
        done_actions.push(*a);
        let r = world.step(a)?;
        grasp_frame_index = r.grasp_frame_index;
        collided = r.collided;
        if r.done {
            break;
        }
    }
    if !world.success() {
        return Ok(Rollout::Rejected {
            steps: done_actions.len(),
            collided,
        });
    }
    let object = world.lifted_object().unwrap_or(0);
    Ok(Rollout::Success(Box::new(Episode {
        frames,
        actions: done_actions,
        target: *target,
        grasp_frame_index,
        success: true,
        object,
        catalog_id: world.objects[object].catalog_id,
        seed,
    })))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    /// Catalog ids cycled over episodes.
    pub objects: Vec<usize>,
    pub episodes: usize,
    pub seed: u64,
    pub detector_samples: usize,
    pub threads: usize,
}

impl GenConfig {
    pub fn new(objects: usize, episodes: usize, seed: u64) -> Self {
        GenConfig {
            objects: (0..objects).collect(),
            episodes,
            seed,
            detector_samples: 48,
            threads: 1,
        }
    }

    pub fn canonical_text(&self) -> String {
        let ids: Vec<String> = self.objects.iter().map(usize::to_string).collect();
        format!(
            "objects={}\nepisodes={}\nseed={}\ndetector_samples={}\n",
            ids.join(","),
            self.episodes,
            self.seed,
            self.detector_samples
        )
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_text().as_bytes()))
    }
}

/// Picks a collision-free target near the home orientation and runs one demonstration.
pub fn generate_episode(catalog_id: usize, seed: u64, detector_samples: usize) -> Result<Rollout> {
    let spec = Suite::training_spec(vec![catalog_id]);
    let mut world = World::spawn(&spec, seed)?;
    let points = world.surface_points();
    let home = home_pose();
    let targets: Vec<GraspCandidate> = sample_targets(&points, detector_samples, seed)?
        .into_iter()
        .filter(|c| rotation_distance(home.rotation(), c.pose.rotation()) <= MAX_TARGET_ROTATION)
        .filter(|c| world.collision_free(&c.pose))
        .collect();
    if targets.is_empty() {
        return Err(DataError::NoFeasibleGrasp);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a67_e75e);
    let target = targets[rng.random_range(0..targets.len())];
    let actions = plan_demo(&world.gripper.pose, &target.pose)?;
    roll_and_record(&mut world, &actions, &target, seed)
}

/// Generated demonstrations and their bookkeeping.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub manifest: BTreeMap<String, String>,
    pub episodes: Vec<Episode>,
}

/// Generates `config.episodes` demonstrations; each index retries a few
/// derived seeds before it is counted as rejected.
pub fn generate_dataset(config: &GenConfig) -> Result<Dataset> {
    if config.objects.is_empty() && config.episodes > 0 {
        return Err(DataError::BadConfig("no objects to demonstrate on".into()));
    }
    let run = |i: usize| -> (Option<Episode>, u64) {
        let obj = config.objects[i % config.objects.len()];
        let mut rejected = 0;
        for attempt in 0..ATTEMPTS_PER_EPISODE {
            let seed = step_seed(config.seed, (i as u64) * ATTEMPTS_PER_EPISODE + attempt);
            match generate_episode(obj, seed, config.detector_samples) {
                Ok(Rollout::Success(ep)) => return (Some(*ep), rejected),
                _ => rejected += 1,
            }
        }
        (None, rejected)
    };
    let threads = config.threads.max(1);
    let mut results: Vec<(Option<Episode>, u64)> = Vec::with_capacity(config.episodes);
    if threads == 1 {
        results.extend((0..config.episodes).map(run));
    } else {
        let mut slots: Vec<Option<(Option<Episode>, u64)>> = (0..config.episodes).map(|_| None).collect();
        std::thread::scope(|s| {
            for (t, chunk) in slots.chunks_mut(config.episodes.div_ceil(threads).max(1)).enumerate() {
                let base = t * config.episodes.div_ceil(threads).max(1);
                let run = &run;
                s.spawn(move || {
                    for (k, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(run(base + k));
                    }
                });
            }
        });
        results.extend(slots.into_iter().map(|s| s.expect("every slot filled")));
    }
    let rejected: u64 = results.iter().map(|r| r.1).sum();
    let episodes: Vec<Episode> = results.into_iter().filter_map(|r| r.0).collect();
    let mut manifest = BTreeMap::new();
    manifest.insert("format_version".into(), DATASET_VERSION.to_string());
    manifest.insert("config_hash".into(), config.hash());
    manifest.insert("seed".into(), config.seed.to_string());
    manifest.insert("requested_episodes".into(), config.episodes.to_string());
    manifest.insert("episodes".into(), episodes.len().to_string());
    manifest.insert("rejected_rollouts".into(), rejected.to_string());
    let ids: Vec<String> = config.objects.iter().map(usize::to_string).collect();
    manifest.insert("objects".into(), ids.join(","));
    Ok(Dataset { manifest, episodes })
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vals: impl IntoIterator<Item = f32>) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_episode(ep: &Episode) -> Vec<u8> {
    let (h, w) = ep
        .frames
        .first()
        .map_or((0, 0), |f| (f.wrist.height, f.wrist.width));
    let mut out = Vec::new();
    out.extend_from_slice(EPISODE_MAGIC);
    put_u32(&mut out, EPISODE_VERSION);
    put_u32(&mut out, ep.len() as u32);
    put_u32(&mut out, h as u32);
    put_u32(&mut out, w as u32);
    for f in &ep.frames {
        put_f32s(&mut out, f.wrist.data.iter().copied());
        put_f32s(&mut out, f.agent.data.iter().copied());
        put_f32s(&mut out, f.proprio.iter().map(|&v| v as f32));
    }
    for a in &ep.actions {
        put_f32s(&mut out, a.iter().map(|&v| v as f32));
    }
    out.extend_from_slice(&ep.target.pose.to_bytes());
    out.extend_from_slice(&ep.target.score.to_le_bytes());
    out.extend_from_slice(&ep.target.width.to_le_bytes());
    put_u32(&mut out, ep.object as u32);
    out.extend_from_slice(&ep.catalog_id.map_or(-1i32, |c| c as i32).to_le_bytes());
    out.extend_from_slice(&ep.seed.to_le_bytes());
    out.extend_from_slice(&ep.grasp_frame_index.map_or(-1i32, |g| g as i32).to_le_bytes());
    out.push(ep.success as u8);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| DataError::CorruptFile(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n * 4)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode_episode(buf: &[u8]) -> Result<Episode> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != EPISODE_MAGIC {
        return Err(DataError::CorruptFile("bad episode magic".into()));
    }
    let v = r.u32()?;
    if v != EPISODE_VERSION {
        return Err(DataError::CorruptFile(format!("episode version {v}")));
    }
    let n = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let mut frames = Vec::with_capacity(n);
    for _ in 0..n {
        let wrist = Raster {
            height: h,
            width: w,
            channels: 2,
            data: r.f32s(2 * h * w)?,
        };
        let agent = Raster {
            height: h,
            width: w,
            channels: 1,
            data: r.f32s(h * w)?,
        };
        let p = r.f32s(10)?;
        let mut proprio = [0.0; 10];
        for (d, s) in proprio.iter_mut().zip(p) {
            *d = s as f64;
        }
        frames.push(Frame { wrist, agent, proprio });
    }
    let mut actions = Vec::with_capacity(n);
    for _ in 0..n {
        let a = r.f32s(ACTION_DIM)?;
        let mut out = [0.0; ACTION_DIM];
        for (d, s) in out.iter_mut().zip(a) {
            *d = s as f64;
        }
        actions.push(out);
    }
    let pose = Pose::from_bytes(r.take(POSE_BYTES)?).map_err(|e| DataError::CorruptFile(e.to_string()))?;
    let score = r.f64()?;
    let width = r.f64()?;
    let object = r.u32()? as usize;
    let catalog_id = usize::try_from(r.i32()?).ok();
    let seed = r.u64()?;
    let grasp_frame_index = usize::try_from(r.i32()?).ok();
    let success = r.take(1)?[0] != 0;
    if r.pos != buf.len() {
        return Err(DataError::CorruptFile(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(Episode {
        frames,
        actions,
        target: GraspCandidate {
            pose,
            score,
            width,
            object: Some(object),
        },
        grasp_frame_index,
        success,
        object,
        catalog_id,
        seed,
    })
}

const MANIFEST_FILE: &str = "manifest.txt";

fn episode_file(i: usize) -> String {
    format!("episode_{i:05}.bin")
}

/// Writes the manifest and one record per episode into `dir`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = data.manifest.clone();
    manifest.insert("episodes".into(), data.episodes.len().to_string());
    manifest.insert("format_version".into(), DATASET_VERSION.to_string());
    let mut text = String::new();
    for (k, v) in &manifest {
        text.push_str(&format!("{k}={v}\n"));
    }
    fs::File::create(dir.join(MANIFEST_FILE))?.write_all(text.as_bytes())?;
    for (i, ep) in data.episodes.iter().enumerate() {
        fs::File::create(dir.join(episode_file(i)))?.write_all(&encode_episode(ep))?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut m = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| DataError::CorruptFile(format!("manifest line {line:?}")))?;
        m.insert(k.to_string(), v.to_string());
    }
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    if manifest.get("format_version").map(String::as_str) != Some("1") {
        return Err(DataError::CorruptFile("unsupported dataset version".into()));
    }
    let n: usize = manifest
        .get("episodes")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| DataError::CorruptFile("manifest lacks an episode count".into()))?;
    let episodes = (0..n)
        .map(|i| {
            let buf = fs::read(dir.join(episode_file(i)))?;
            decode_episode(&buf)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, episodes })
}

/// Training windows over a dataset: every step starts a chunk of `horizon`
/// actions, padded with the episode's last action.
#[derive(Debug, Clone)]
pub struct Windows<'a> {
    pub episodes: &'a [Episode],
    pub horizon: usize,
    pub use_cue: bool,
    index: Vec<(usize, usize)>,
}

impl<'a> Windows<'a> {
    pub fn new(episodes: &'a [Episode], horizon: usize, use_cue: bool) -> Self {
        let index = episodes
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.len()).map(move |t| (e, t)))
            .collect();
        Windows {
            episodes,
            horizon,
            use_cue,
            index,
        }
    }

    pub fn position(&self, i: usize) -> (usize, usize) {
        self.index[i]
    }

    pub fn chunk(&self, i: usize) -> ChunkSample {
        let (e, t) = self.index[i];
        let ep = &self.episodes[e];
        let last = ep.actions[ep.len() - 1];
        let actions = (t..t + self.horizon).map(|k| ep.actions.get(k).copied().unwrap_or(last)).collect();
        ChunkSample {
            actions: ActionChunk(actions),
            guide: ep.target.pose,
        }
    }

    pub fn chunks(&self) -> Vec<ChunkSample> {
        (0..self.index.len()).map(|i| self.chunk(i)).collect()
    }
}

impl WindowSource for Windows<'_> {
    fn len(&self) -> usize {
        self.index.len()
    }

    fn observation(&self, i: usize) -> Observation {
        let (e, t) = self.index[i];
        let ep = &self.episodes[e];
        Observation::from_frames(&ep.frames[t.saturating_sub(1)], &ep.frames[t], self.use_cue)
    }

    fn guide(&self, i: usize) -> Pose {
        self.episodes[self.index[i].0].target.pose
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn down(x: f64, y: f64, z: f64) -> Pose {
        Pose::from_axis_angle(&Vector3::x(), std::f64::consts::PI, Vector3::new(x, y, z))
    }

    #[test]
    fn trajectory_endpoints_and_degenerate_case() {
        let start = home_pose();
        let g = down(0.05, -0.03, 0.02);
        let t = synthesize_trajectory(&start, &g, 12).unwrap();
        assert_eq!(t.len(), 12);
        assert_eq!(t[0], start);
        assert_eq!(t[11], g);
        assert_eq!(synthesize_trajectory(&start, &g, 2).unwrap(), vec![start, g]);
        assert!(synthesize_trajectory(&start, &g, 1).is_err());
    }

    #[test]
    fn uniform_path_is_left_alone() {
        let p: Vec<Pose> = (0..6).map(|i| down(0.01 * i as f64, 0.0, 0.2)).collect();
        let q = debias_speed(&p);
        for (a, b) in p.iter().zip(&q) {
            assert!((a.translation() - b.translation()).norm() < 1e-9);
        }
        let two = vec![p[0], p[5]];
        assert_eq!(debias_speed(&two), two);
    }

    #[test]
    fn demo_plan_ends_with_lift() {
        let g = down(0.05, 0.0, 0.03);
        let a = plan_demo(&home_pose(), &g).unwrap();
        let last = a.last().unwrap();
        assert!(last[2] - 0.03 >= LIFT_HEIGHT - 1e-6);
        assert!(last[2] - 0.03 < LIFT_HEIGHT + STEP_LENGTH);
        assert_eq!(last[9], 0.0);
        let closes = a.iter().position(|x| x[9] < 0.5).unwrap();
        assert!((Pose::from_vec9(&a[closes]).unwrap().translation() - g.translation()).norm() < 1e-6);
    }

    #[test]
    fn corrupt_records_are_rejected() {
        assert!(matches!(decode_episode(b"GEPX"), Err(DataError::CorruptFile(_))));
        assert!(matches!(decode_episode(b"GEPD\x01\0\0\0"), Err(DataError::CorruptFile(_))));
    }
}
