//! Kinematic parallel-jaw grasping simulator.
//!
//! Objects rest on a table at `z = 0`. The gripper follows commanded poses
//! directly, limited per step; closing attaches an object when both pads touch
//! it, and an attached object lifted by 10 cm counts as a success.

mod scene;
mod shapes;

pub use scene::{catalog, CatalogEntry, MotionSpec, ObjectSpec, Range, RenderSettings, SceneSpec, ShapeSource, Suite, NOVEL_OBJECTS, TRAIN_OBJECTS};
pub use shapes::{intersects, Placed, Shape};

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::{interpolate_pose, rotation_distance, Pose, Rot6D, rot6d_to_matrix};
use crate::graspsense::{project_points, score_graspness, CameraModel, Raster, SurfacePoint, GRIPPER_MAX_WIDTH};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("episode already finished")]
    EpisodeFinished,
    #[error("could not place object {0} without overlap")]
    PlacementFailure(usize),
    #[error("scene has no objects")]
    NoTarget,
    #[error("bad scene spec: {0}")]
    BadSpec(String),
}

pub type Result<T> = std::result::Result<T, SimError>;

pub const MAX_STEPS: usize = 150;
pub const MAX_STEP_TRANSLATION: f64 = 0.03;
pub const MAX_STEP_ROTATION: f64 = 15.0 * std::f64::consts::PI / 180.0;
pub const LIFT_SUCCESS_HEIGHT: f64 = 0.10;
pub const CONTACT_TOLERANCE: f64 = 0.003;
pub const WORKSPACE_HALF: f64 = 0.25;
pub const FAR_DEPTH: f64 = 1.0;
pub const WRIST_CAMERA_OFFSET: f64 = 0.10;
pub const SURFACE_SPACING: f64 = 0.004;

/// Half extents of one pad's contact patch: along the gripper y and z axes.
pub const PAD_HALF_WIDTH: f64 = 0.01;
pub const PAD_HALF_LENGTH: f64 = 0.015;
const FINGER_HALF_THICKNESS: f64 = 0.004;
const FINGER_BASE: f64 = -0.05;
const PALM_DEPTH: f64 = 0.01;
const COLLISION_SHRINK: f64 = 0.0005;
const CONTACT_GRID: usize = 5;

/// Gripper pose above the table center, pointing down.
pub fn home_pose() -> Pose {
    Pose::from_parts_unchecked(
        Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)),
        Vector3::new(0.0, 0.0, 0.30),
    )
}

/// Finger and palm boxes at `pose` with the jaws `opening` apart.
pub fn jaw_volume(pose: &Pose, opening: f64) -> [Placed; 3] {
    let finger_half_z = (PAD_HALF_LENGTH - FINGER_BASE) / 2.0;
    let finger_cz = (PAD_HALF_LENGTH + FINGER_BASE) / 2.0;
    let finger = |side: f64| Placed {
        shape: Shape::Box {
            half: Vector3::new(
                FINGER_HALF_THICKNESS - COLLISION_SHRINK,
                PAD_HALF_WIDTH - COLLISION_SHRINK,
                finger_half_z - COLLISION_SHRINK,
            ),
        },
        pose: pose.compose(&Pose::from_translation(Vector3::new(
            side * (opening / 2.0 + FINGER_HALF_THICKNESS),
            0.0,
            finger_cz,
        ))),
    };
    let palm = Placed {
        shape: Shape::Box {
            half: Vector3::new(
                GRIPPER_MAX_WIDTH / 2.0 + 2.0 * FINGER_HALF_THICKNESS - COLLISION_SHRINK,
                PAD_HALF_WIDTH - COLLISION_SHRINK,
                PALM_DEPTH / 2.0 - COLLISION_SHRINK,
            ),
        },
        pose: pose.compose(&Pose::from_translation(Vector3::new(0.0, 0.0, FINGER_BASE - PALM_DEPTH / 2.0))),
    };
    [finger(-1.0), finger(1.0), palm]
}

/// Whether the jaws at `pose` hit the table or any object not in `ignore`.
pub fn jaw_collides(pose: &Pose, opening: f64, objects: &[Placed], ignore: Option<usize>) -> bool {
    jaw_volume(pose, opening).iter().any(|part| {
        part.min_z() < 0.0
            || objects
                .iter()
                .enumerate()
                .any(|(i, o)| Some(i) != ignore && intersects(part, o))
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Motion {
    Static,
    /// Constant planar velocity per step, reflected at the workspace edge.
    Linear { velocity: Vector3<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Object {
    pub catalog_id: Option<usize>,
    pub body: Placed,
    pub spawn_z: f64,
    pub motion: Motion,
    pub removed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gripper {
    pub pose: Pose,
    pub opening: f64,
    pub closed: bool,
    /// Attached object and its pose relative to the gripper.
    pub attached: Option<(usize, Pose)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub done: bool,
    pub success: bool,
    pub collided: bool,
    pub grasp_frame_index: Option<usize>,
    /// Gripper pose at the first close command.
    pub grasp_frame_pose: Option<Pose>,
}

/// One timestep of sensor data before stacking and cue masking.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// `[depth, graspness]` from the wrist camera.
    pub wrist: Raster,
    /// `[depth]` from the fixed agent camera.
    pub agent: Raster,
    /// Gripper pose as translation + 6D rotation, then 1 when open, 0 when closed.
    pub proprio: [f64; 10],
}

fn scored_points_cache() -> &'static Mutex<HashMap<[u64; 4], Arc<Vec<SurfacePoint>>>> {
    static CACHE: OnceLock<Mutex<HashMap<[u64; 4], Arc<Vec<SurfacePoint>>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Graspness-scored surface samples in the shape's own frame. Scores are
/// rigid-invariant, so they are computed once per shape.
pub fn scored_surface(shape: &Shape) -> Arc<Vec<SurfacePoint>> {
    let key = match *shape {
        Shape::Box { half } => [0, half.x.to_bits(), half.y.to_bits(), half.z.to_bits()],
        Shape::Cylinder { radius, half_height } => [1, radius.to_bits(), half_height.to_bits(), 0],
        Shape::Sphere { radius } => [2, radius.to_bits(), 0, 0],
    };
    if let Some(v) = scored_points_cache().lock().unwrap().get(&key) {
        return v.clone();
    }
    let pts = shape.surface_points(SURFACE_SPACING, 0);
    let scored = Arc::new(score_graspness(&pts, GRIPPER_MAX_WIDTH).unwrap_or_default());
    scored_points_cache()
        .lock()
        .unwrap()
        .insert(key, scored.clone());
    scored
}

#[derive(Debug, Clone)]
pub struct World {
    pub objects: Vec<Object>,
    pub gripper: Gripper,
    pub step_count: usize,
    pub render: RenderSettings,
    done: bool,
    success: bool,
    collided: bool,
    grasp_frame_index: Option<usize>,
    grasp_frame_pose: Option<Pose>,
    lifted: Option<usize>,
    noise_rng: ChaCha8Rng,
}

impl World {
    pub fn new(objects: Vec<Object>, render: RenderSettings, seed: u64) -> Self {
        World {
            objects,
            gripper: Gripper {
                pose: home_pose(),
                opening: GRIPPER_MAX_WIDTH,
                closed: false,
                attached: None,
            },
            step_count: 0,
            render,
            done: false,
            success: false,
            collided: false,
            grasp_frame_index: None,
            grasp_frame_pose: None,
            lifted: None,
            noise_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_d3b7),
        }
    }

    pub fn spawn(spec: &SceneSpec, seed: u64) -> Result<World> {
        scene::spawn(spec, seed)
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn success(&self) -> bool {
        self.success
    }

    /// Gripper pose at the step it first began to close.
    pub fn grasp_frame_pose(&self) -> Option<Pose> {
        self.grasp_frame_pose
    }

    pub fn lifted_object(&self) -> Option<usize> {
        self.lifted
    }

    /// Bodies of objects still in the scene, indexed like `objects`.
    pub fn bodies(&self) -> Vec<Placed> {
        self.objects
            .iter()
            .map(|o| {
                if o.removed {
                    // far below the table, never hit
                    Placed {
                        shape: o.body.shape,
                        pose: Pose::from_translation(Vector3::new(0.0, 0.0, -100.0)),
                    }
                } else {
                    o.body
                }
            })
            .collect()
    }

    pub fn active_objects(&self) -> impl Iterator<Item = (usize, &Object)> {
        self.objects.iter().enumerate().filter(|(_, o)| !o.removed)
    }

    /// Scored surface points of every object still on the table, in world frame.
    pub fn surface_points(&self) -> Vec<SurfacePoint> {
        let mut out = Vec::new();
        for (i, o) in self.active_objects() {
            if self.gripper.attached.is_some_and(|(a, _)| a == i) {
                continue;
            }
            for p in scored_surface(&o.body.shape).iter() {
                let mut q = p.transformed(&o.body.pose);
                q.object = i;
                out.push(q);
            }
        }
        out
    }

    pub fn collision_free(&self, pose: &Pose) -> bool {
        !jaw_collides(pose, GRIPPER_MAX_WIDTH, &self.bodies(), None)
    }

    /// Clears the finished state and the held object so another attempt can start.
    pub fn reset_attempt(&mut self) {
        if let Some(i) = self.lifted.take() {
            self.objects[i].removed = true;
        }
        self.gripper = Gripper {
            pose: home_pose(),
            opening: GRIPPER_MAX_WIDTH,
            closed: false,
            attached: None,
        };
        self.step_count = 0;
        self.done = false;
        self.success = false;
        self.collided = false;
        self.grasp_frame_index = None;
        self.grasp_frame_pose = None;
    }

    fn clamp_target(&self, target: &Pose) -> Pose {
        let cur = self.gripper.pose;
        let dt = target.translation() - cur.translation();
        let n = dt.norm();
        let t = if n > MAX_STEP_TRANSLATION {
            cur.translation() + dt * (MAX_STEP_TRANSLATION / n)
        } else {
            *target.translation()
        };
        let angle = rotation_distance(cur.rotation(), target.rotation());
        let r = if angle > MAX_STEP_ROTATION {
            let cur_r = Pose::from_parts_unchecked(*cur.rotation(), Vector3::zeros());
            let tgt_r = Pose::from_parts_unchecked(*target.rotation(), Vector3::zeros());
            interpolate_pose(&cur_r, &tgt_r, MAX_STEP_ROTATION / angle)
                .map(|p| *p.rotation())
                .unwrap_or(*cur.rotation())
        } else {
            *target.rotation()
        };
        Pose::from_parts_unchecked(r, t).renormalized()
    }

    fn advance_motion(&mut self) {
        let limit = WORKSPACE_HALF - 0.05;
        for (i, o) in self.objects.iter_mut().enumerate() {
            if o.removed || self.gripper.attached.is_some_and(|(a, _)| a == i) {
                continue;
            }
            if let Motion::Linear { velocity } = &mut o.motion {
                let mut t = *o.body.pose.translation() + *velocity;
                let r = o.body.shape.footprint_radius();
                for k in 0..2 {
                    if t[k] + r > limit || t[k] - r < -limit {
                        velocity[k] = -velocity[k];
                        t[k] = o.body.pose.translation()[k] + velocity[k];
                    }
                }
                o.body.pose.set_translation(t);
            }
        }
    }

    /// Rays from each pad toward the other; returns the closing travel of each
    /// finger and the attached object if some pad cell touches it on both sides.
    fn close_jaws(&self) -> (f64, f64, Option<usize>) {
        let pose = self.gripper.pose;
        let w = self.gripper.opening;
        let bodies = self.bodies();
        let x = pose.axis(0);
        let cast = |side: f64, y: f64, z: f64| -> Option<(f64, usize)> {
            let o = pose.transform_point(&Vector3::new(side * w / 2.0, y, z));
            let d = x * -side;
            bodies
                .iter()
                .enumerate()
                .filter_map(|(i, b)| b.ray_cast(&o, &d).map(|(t, _)| (t, i)))
                .filter(|&(t, _)| t <= w)
                .min_by(|a, b| a.0.total_cmp(&b.0))
        };
        let grid = |k: usize, half: f64| -half + 2.0 * half * k as f64 / (CONTACT_GRID - 1) as f64;
        let mut hits = Vec::with_capacity(CONTACT_GRID * CONTACT_GRID);
        for a in 0..CONTACT_GRID {
            for b in 0..CONTACT_GRID {
                let (y, z) = (grid(a, PAD_HALF_WIDTH), grid(b, PAD_HALF_LENGTH));
                hits.push((cast(-1.0, y, z), cast(1.0, y, z)));
            }
        }
        let nearest = |f: &dyn Fn(&(Option<(f64, usize)>, Option<(f64, usize)>)) -> Option<(f64, usize)>| {
            hits.iter()
                .filter_map(f)
                .min_by(|a, b| a.0.total_cmp(&b.0))
        };
        let left = nearest(&|h| h.0);
        let right = nearest(&|h| h.1);
        let travel_l = left.map_or(w / 2.0, |(t, _)| t.min(w / 2.0));
        let travel_r = right.map_or(w / 2.0, |(t, _)| t.min(w / 2.0));
        let attach = match (left, right) {
            (Some((tl, il)), Some((tr, ir))) if il == ir && tl + tr <= w => {
                let touching = hits.iter().any(|(l, r)| {
                    matches!((l, r), (Some((a, i)), Some((b, j)))
                        if *i == il && *j == il && *a <= tl + CONTACT_TOLERANCE && *b <= tr + CONTACT_TOLERANCE)
                });
                touching.then_some(il)
            }
            _ => None,
        };
        (travel_l, travel_r, attach)
    }

    /// Executes one action: absolute target pose (translation, 6D rotation)
    /// and a gripper channel where values below 0.5 command closing.
    pub fn step(&mut self, action: &[f64; 10]) -> Result<StepResult> {
        if self.done {
            return Err(SimError::EpisodeFinished);
        }
        if self.objects.is_empty() {
            return Err(SimError::NoTarget);
        }
        let r6 = Rot6D([action[3], action[4], action[5], action[6], action[7], action[8]]);
        let target_rot = rot6d_to_matrix(&r6).unwrap_or(*self.gripper.pose.rotation());
        let t = Vector3::new(action[0], action[1], action[2]);
        let target = if t.iter().all(|v| v.is_finite()) {
            Pose::from_parts_unchecked(target_rot, t)
        } else {
            self.gripper.pose
        };
        let new_pose = self.clamp_target(&target);

        self.advance_motion();
        self.gripper.pose = new_pose;
        if let Some((i, rel)) = self.gripper.attached {
            self.objects[i].body.pose = new_pose.compose(&rel);
        }

        let close = action[9] < 0.5;
        if close && !self.gripper.closed {
            if self.grasp_frame_index.is_none() {
                self.grasp_frame_index = Some(self.step_count);
                self.grasp_frame_pose = Some(new_pose);
            }
            let (tl, tr, attach) = self.close_jaws();
            self.gripper.opening = (self.gripper.opening - tl - tr).max(0.0);
            self.gripper.closed = true;
            if let Some(i) = attach {
                let rel = new_pose.inverse().compose(&self.objects[i].body.pose);
                self.gripper.attached = Some((i, rel));
            }
        } else if !close && self.gripper.closed {
            if let Some((i, _)) = self.gripper.attached.take() {
                let o = &mut self.objects[i];
                let mut p = o.body.pose;
                let mut tr = *p.translation();
                tr.z = o.spawn_z;
                p.set_translation(tr);
                o.body.pose = p;
            }
            self.gripper.closed = false;
            self.gripper.opening = GRIPPER_MAX_WIDTH;
        }

        let held = self.gripper.attached.map(|(i, _)| i);
        if jaw_collides(&self.gripper.pose, self.gripper.opening, &self.bodies(), held) {
            self.collided = true;
            self.done = true;
        }
        if let Some(i) = held {
            let o = &self.objects[i];
            if !self.collided && o.body.pose.translation().z - o.spawn_z > LIFT_SUCCESS_HEIGHT {
                self.success = true;
                self.lifted = Some(i);
                self.done = true;
            }
        }
        self.step_count += 1;
        if self.step_count >= MAX_STEPS {
            self.done = true;
        }
        Ok(StepResult {
            done: self.done,
            success: self.success,
            collided: self.collided,
            grasp_frame_index: self.grasp_frame_index,
            grasp_frame_pose: self.grasp_frame_pose,
        })
    }

    pub fn wrist_camera(&self) -> CameraModel {
        let pose = self
            .gripper
            .pose
            .compose(&Pose::from_translation(Vector3::new(0.0, 0.0, -WRIST_CAMERA_OFFSET)));
        CameraModel::standard(pose)
    }

    pub fn agent_camera() -> CameraModel {
        let eye = Vector3::new(0.0, -0.55, 0.45);
        let target = Vector3::new(0.0, 0.0, 0.02);
        let z = (target - eye).normalize();
        let x = z.cross(&Vector3::z()).normalize();
        let y = z.cross(&x);
        CameraModel::standard(Pose::from_parts_unchecked(Matrix3::from_columns(&[x, y, z]), eye))
    }

    /// Noise-free z-depth raster; misses and anything beyond the far clip read `FAR_DEPTH`.
    pub fn depth_image(&self, cam: &CameraModel) -> Vec<f64> {
        let bodies: Vec<Placed> = self.active_objects().map(|(_, o)| o.body).collect();
        let axis = cam.optical_axis();
        let mut out = vec![FAR_DEPTH; cam.height * cam.width];
        for row in 0..cam.height {
            for col in 0..cam.width {
                let (o, d) = cam.ray(row, col);
                let t = bodies
                    .iter()
                    .filter_map(|b| b.ray_cast(&o, &d).map(|h| h.0))
                    .fold(f64::INFINITY, f64::min);
                let z = t * d.dot(&axis);
                if z < FAR_DEPTH {
                    out[row * cam.width + col] = z;
                }
            }
        }
        out
    }

    fn perturb(&mut self, depth: &[f64]) -> Vec<f32> {
        let RenderSettings { gain, noise } = self.render;
        let normal = (noise > 0.0).then(|| Normal::new(0.0, noise).unwrap());
        depth
            .iter()
            .map(|&d| {
                let mut v = gain * d;
                if let Some(n) = &normal {
                    v += n.sample(&mut self.noise_rng);
                }
                v.clamp(0.0, FAR_DEPTH * 2.0) as f32
            })
            .collect()
    }

    pub fn observe(&mut self) -> Frame {
        let wcam = self.wrist_camera();
        let depth = self.depth_image(&wcam);
        let pts = self.surface_points();
        let visible: Vec<SurfacePoint> = pts
            .into_iter()
            .filter(|p| {
                wcam.project(&p.position).is_some_and(|(r, c, z)| z <= depth[r * wcam.width + c] + 0.005)
            })
            .collect();
        let gmap = project_points(&visible, &wcam);
        let mut wrist = Raster::filled(wcam.height, wcam.width, 2, 0.0);
        let wd = self.perturb(&depth);
        wrist.channel_mut(0).copy_from_slice(&wd);
        for (dst, &g) in wrist.channel_mut(1).iter_mut().zip(&gmap.values) {
            *dst = g as f32;
        }
        let acam = Self::agent_camera();
        let ad = self.depth_image(&acam);
        let ad = self.perturb(&ad);
        let mut agent = Raster::filled(acam.height, acam.width, 1, 0.0);
        agent.channel_mut(0).copy_from_slice(&ad);
        let v9 = self.gripper.pose.to_vec9();
        let mut proprio = [0.0; 10];
        proprio[..9].copy_from_slice(&v9);
        proprio[9] = if self.gripper.closed { 0.0 } else { 1.0 };
        Frame { wrist, agent, proprio }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_box_world() -> World {
        let shape = Shape::cuboid(0.04, 0.04, 0.04);
        let obj = Object {
            catalog_id: None,
            body: Placed {
                shape,
                pose: Pose::from_translation(Vector3::new(0.0, 0.0, 0.02)),
            },
            spawn_z: 0.02,
            motion: Motion::Static,
            removed: false,
        };
        World::new(vec![obj], RenderSettings::default(), 0)
    }

    fn action(p: &Pose, grip: f64) -> [f64; 10] {
        let mut a = [0.0; 10];
        a[..9].copy_from_slice(&p.to_vec9());
        a[9] = grip;
        a
    }

    #[test]
    fn antipodal_grasp_then_lift_succeeds() {
        let mut w = single_box_world();
        let g = home_pose().compose(&Pose::identity());
        let mut grasp = g;
        grasp.set_translation(Vector3::new(0.0, 0.0, 0.02));
        let mut p = home_pose();
        while (p.translation() - grasp.translation()).norm() > 1e-9 {
            let dz = (p.translation().z - 0.02).min(0.02);
            p.set_translation(p.translation() - Vector3::new(0.0, 0.0, dz));
            assert!(!w.step(&action(&p, 1.0)).unwrap().done);
        }
        let r = w.step(&action(&grasp, 0.0)).unwrap();
        assert!(w.gripper.attached.is_some());
        assert!((w.gripper.opening - 0.04).abs() < 1e-9);
        assert_eq!(r.grasp_frame_index, Some(w.step_count - 1));
        let mut up = grasp;
        let mut last = r;
        for k in 1..=6 {
            up.set_translation(grasp.translation() + Vector3::new(0.0, 0.0, 0.02 * k as f64));
            last = w.step(&action(&up, 0.0)).unwrap();
            if last.done {
                break;
            }
        }
        assert!(last.success && last.done);
    }

    #[test]
    fn closing_in_free_space_attaches_nothing() {
        let mut w = single_box_world();
        w.step(&action(&home_pose(), 0.0)).unwrap();
        assert!(w.gripper.attached.is_none());
        assert_eq!(w.gripper.opening, 0.0);
    }

    #[test]
    fn episode_ends_at_step_limit() {
        let mut w = single_box_world();
        let a = action(&home_pose(), 1.0);
        for _ in 0..MAX_STEPS - 1 {
            assert!(!w.step(&a).unwrap().done);
        }
        assert!(w.step(&a).unwrap().done);
        assert_eq!(w.step(&a), Err(SimError::EpisodeFinished));
    }

    #[test]
    fn per_step_motion_is_clamped() {
        let mut w = single_box_world();
        let far = Pose::from_axis_angle(&Vector3::z(), 1.0, Vector3::new(0.2, 0.0, 0.3)).compose(&home_pose());
        let start = w.gripper.pose;
        w.step(&action(&far, 1.0)).unwrap();
        let moved = (w.gripper.pose.translation() - start.translation()).norm();
        assert!((moved - MAX_STEP_TRANSLATION).abs() < 1e-9);
        let turned = rotation_distance(w.gripper.pose.rotation(), start.rotation());
        assert!((turned - MAX_STEP_ROTATION).abs() < 1e-9);
    }

    #[test]
    fn descending_into_table_collides() {
        let mut w = single_box_world();
        let mut p = home_pose();
        p.set_translation(Vector3::new(0.15, 0.0, 0.30));
        w.gripper.pose = p;
        let mut res = None;
        for _ in 0..20 {
            p.set_translation(p.translation() - Vector3::new(0.0, 0.0, 0.02));
            let r = w.step(&action(&p, 1.0)).unwrap();
            if r.done {
                res = Some(r);
                break;
            }
        }
        let r = res.unwrap();
        assert!(r.collided && !r.success);
        assert!(p.translation().z < PAD_HALF_LENGTH + 0.001);
    }

    #[test]
    fn empty_world_renders_far() {
        let mut w = World::new(vec![], RenderSettings::default(), 0);
        let f = w.observe();
        assert_eq!(w.step(&action(&home_pose(), 1.0)), Err(SimError::NoTarget));
        assert!(f.wrist.channel(0).iter().all(|&d| d == FAR_DEPTH as f32));
        assert!(f.wrist.channel(1).iter().all(|&g| g == 0.0));
        assert_eq!(f.proprio[9], 1.0);
    }

    #[test]
    fn box_shows_up_in_both_views_with_graspness() {
        let mut w = single_box_world();
        let f = w.observe();
        let d = f.wrist.get(0, 32, 32);
        // camera 0.40 above the table, box top at 0.04
        assert!((d - 0.36).abs() < 1e-6, "{d}");
        assert!(f.agent.channel(0).iter().any(|&v| v < 0.9));
        // top face has no antipodal partner
        assert_eq!(f.wrist.get(1, 32, 32), 0.0);
    }
}
