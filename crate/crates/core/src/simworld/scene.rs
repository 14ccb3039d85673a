//! Scene specifications, the object catalog and the evaluation suites.
//!
//! Spec text is one directive per line:
//!
//! ```text
//! object catalog=0,1,2 x=-0.12:0.12 y=-0.12:0.12 yaw=-3.1416:3.1416 motion=static
//! object shape=cylinder:0.02,0.08 x=0.05 y=0 yaw=0 motion=linear:0.004:0.006
//! render gain=1.1 noise=0.01
//! ```

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Motion, Object, Placed, Result, Shape, SimError, World, WORKSPACE_HALF};
use crate::geometry::Pose;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CatalogEntry {
    pub name: &'static str,
    pub shape: Shape,
}

pub const TRAIN_OBJECTS: std::ops::Range<usize> = 0..10;
pub const NOVEL_OBJECTS: std::ops::Range<usize> = 10..14;

pub fn catalog() -> [CatalogEntry; 14] {
    let e = |name, shape| CatalogEntry { name, shape };
    [
        e("cube-4", Shape::cuboid(0.04, 0.04, 0.04)),
        e("block-3x6x5", Shape::cuboid(0.03, 0.06, 0.05)),
        e("slab-5x5x3", Shape::cuboid(0.05, 0.05, 0.03)),
        e("can-2x8", Shape::cylinder(0.02, 0.08)),
        e("puck-2.5x5", Shape::cylinder(0.025, 0.05)),
        e("ball-2.5", Shape::sphere(0.025)),
        e("bar-2.5x8x4", Shape::cuboid(0.025, 0.08, 0.04)),
        e("rod-1.5x10", Shape::cylinder(0.015, 0.10)),
        e("brick-6x3x3", Shape::cuboid(0.06, 0.03, 0.03)),
        e("ball-3", Shape::sphere(0.03)),
        e("tower-3.5x3.5x7", Shape::cuboid(0.035, 0.035, 0.07)),
        e("tin-3x4", Shape::cylinder(0.03, 0.04)),
        e("ball-2", Shape::sphere(0.02)),
        e("plate-4.5x2x6", Shape::cuboid(0.045, 0.02, 0.06)),
    ]
}

/// Closed interval sampled uniformly; a single value is a degenerate interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn fixed(v: f64) -> Range {
        Range { lo: v, hi: v }
    }

    pub fn new(lo: f64, hi: f64) -> Range {
        Range { lo, hi }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }
}

impl fmt::Display for Range {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.lo == self.hi {
            write!(f, "{}", self.lo)
        } else {
            write!(f, "{}:{}", self.lo, self.hi)
        }
    }
}

impl FromStr for Range {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Range> {
        let num = |t: &str| t.parse::<f64>().map_err(|_| SimError::BadSpec(format!("number {t:?}")));
        match s.split_once(':') {
            Some((a, b)) => {
                let r = Range::new(num(a)?, num(b)?);
                if r.lo > r.hi {
                    return Err(SimError::BadSpec(format!("empty range {s}")));
                }
                Ok(r)
            }
            None => Ok(Range::fixed(num(s)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ShapeSource {
    /// Uniform choice among catalog indices.
    Catalog(Vec<usize>),
    Explicit(Shape),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MotionSpec {
    Static,
    /// Speed in meters per step, heading uniform.
    Linear(Range),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub shape: ShapeSource,
    pub x: Range,
    pub y: Range,
    pub yaw: Range,
    pub motion: MotionSpec,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub gain: f64,
    pub noise: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings { gain: 1.0, noise: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub render: RenderSettings,
}

fn shape_to_text(s: &Shape) -> String {
    match *s {
        Shape::Box { half } => format!("box:{},{},{}", 2.0 * half.x, 2.0 * half.y, 2.0 * half.z),
        Shape::Cylinder { radius, half_height } => format!("cylinder:{},{}", radius, 2.0 * half_height),
        Shape::Sphere { radius } => format!("sphere:{radius}"),
    }
}

fn shape_from_text(s: &str) -> Result<Shape> {
    let bad = || SimError::BadSpec(format!("shape {s:?}"));
    let (kind, dims) = s.split_once(':').ok_or_else(bad)?;
    let d: Vec<f64> = dims
        .split(',')
        .map(|t| t.parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    if d.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(bad());
    }
    match (kind, d.as_slice()) {
        ("box", [x, y, z]) => Ok(Shape::cuboid(*x, *y, *z)),
        ("cylinder", [r, h]) => Ok(Shape::cylinder(*r, *h)),
        ("sphere", [r]) => Ok(Shape::sphere(*r)),
        _ => Err(bad()),
    }
}

impl fmt::Display for SceneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for o in &self.objects {
            let shape = match &o.shape {
                ShapeSource::Catalog(ids) => format!(
                    "catalog={}",
                    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
                ),
                ShapeSource::Explicit(s) => format!("shape={}", shape_to_text(s)),
            };
            let motion = match o.motion {
                MotionSpec::Static => "static".to_string(),
                MotionSpec::Linear(r) => format!("linear:{r}"),
            };
            writeln!(f, "object {shape} x={} y={} yaw={} motion={motion}", o.x, o.y, o.yaw)?;
        }
        writeln!(f, "render gain={} noise={}", self.render.gain, self.render.noise)
    }
}

impl FromStr for SceneSpec {
    type Err = SimError;

    fn from_str(text: &str) -> Result<SceneSpec> {
        let mut spec = SceneSpec::default();
        let n_catalog = catalog().len();
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut words = line.split_whitespace();
            let head = words.next().unwrap_or("");
            let kv = words
                .map(|w| {
                    w.split_once('=')
                        .ok_or_else(|| SimError::BadSpec(format!("line {}: expected key=value, got {w:?}", ln + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            match head {
                "object" => {
                    let mut o = ObjectSpec {
                        shape: ShapeSource::Catalog(TRAIN_OBJECTS.collect()),
                        x: Range::fixed(0.0),
                        y: Range::fixed(0.0),
                        yaw: Range::fixed(0.0),
                        motion: MotionSpec::Static,
                    };
                    for (k, v) in kv {
                        match k {
                            "catalog" => {
                                let ids = v
                                    .split(',')
                                    .map(|t| t.parse::<usize>().ok().filter(|&i| i < n_catalog))
                                    .collect::<Option<Vec<_>>>()
                                    .filter(|ids| !ids.is_empty())
                                    .ok_or_else(|| SimError::BadSpec(format!("catalog ids {v:?}")))?;
                                o.shape = ShapeSource::Catalog(ids);
                            }
                            "shape" => o.shape = ShapeSource::Explicit(shape_from_text(v)?),
                            "x" => o.x = v.parse()?,
                            "y" => o.y = v.parse()?,
                            "yaw" => o.yaw = v.parse()?,
                            "motion" => {
                                o.motion = if v == "static" {
                                    MotionSpec::Static
                                } else if let Some(r) = v.strip_prefix("linear:") {
                                    MotionSpec::Linear(r.parse()?)
                                } else {
                                    return Err(SimError::BadSpec(format!("motion {v:?}")));
                                }
                            }
                            _ => return Err(SimError::BadSpec(format!("unknown object key {k:?}"))),
                        }
                    }
                    spec.objects.push(o);
                }
                "render" => {
                    for (k, v) in kv {
                        let x: f64 = v.parse().map_err(|_| SimError::BadSpec(format!("{k}={v}")))?;
                        match k {
                            "gain" if x > 0.0 => spec.render.gain = x,
                            "noise" if x >= 0.0 => spec.render.noise = x,
                            _ => return Err(SimError::BadSpec(format!("render {k}={v}"))),
                        }
                    }
                }
                other => return Err(SimError::BadSpec(format!("unknown directive {other:?}"))),
            }
        }
        Ok(spec)
    }
}

const PLACEMENT_ATTEMPTS: usize = 100;
const PLACEMENT_GAP: f64 = 0.01;

pub(super) fn spawn(spec: &SceneSpec, seed: u64) -> Result<World> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cat = catalog();
    let mut objects: Vec<Object> = Vec::with_capacity(spec.objects.len());
    for (idx, os) in spec.objects.iter().enumerate() {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let (catalog_id, shape) = match &os.shape {
                ShapeSource::Catalog(ids) => {
                    let id = ids[rng.random_range(0..ids.len())];
                    (Some(id), cat[id].shape)
                }
                ShapeSource::Explicit(s) => (None, *s),
            };
            let x = os.x.sample(&mut rng);
            let y = os.y.sample(&mut rng);
            let yaw = os.yaw.sample(&mut rng);
            let r = shape.footprint_radius();
            if x.abs() + r > WORKSPACE_HALF || y.abs() + r > WORKSPACE_HALF {
                continue;
            }
            let clear = objects.iter().all(|o| {
                let d = (o.body.pose.translation().xy() - Vector3::new(x, y, 0.0).xy()).norm();
                d >= o.body.shape.footprint_radius() + r + PLACEMENT_GAP
            });
            if !clear {
                continue;
            }
            let z = shape.rest_height();
            let motion = match os.motion {
                MotionSpec::Static => Motion::Static,
                MotionSpec::Linear(speed) => {
                    let s = speed.sample(&mut rng);
                    let heading = rng.random_range(0.0..std::f64::consts::TAU);
                    Motion::Linear {
                        velocity: Vector3::new(s * heading.cos(), s * heading.sin(), 0.0),
                    }
                }
            };
            placed = Some(Object {
                catalog_id,
                body: Placed {
                    shape,
                    pose: Pose::from_axis_angle(&Vector3::z(), yaw, Vector3::new(x, y, z)),
                },
                spawn_z: z,
                motion,
                removed: false,
            });
            break;
        }
        objects.push(placed.ok_or(SimError::PlacementFailure(idx))?);
    }
    Ok(World::new(objects, spec.render, seed))
}

/// Named evaluation suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    InDomain,
    Spatial,
    Object,
    Visual,
    Cluttered(u8),
    Dynamic,
}

pub const TRAIN_XY: f64 = 0.12;
const SPATIAL_XY: f64 = 0.17;

impl Suite {
    pub fn all() -> Vec<Suite> {
        let mut v = vec![Suite::InDomain, Suite::Spatial, Suite::Object, Suite::Visual];
        v.extend((1..=4).map(Suite::Cluttered));
        v.push(Suite::Dynamic);
        v
    }

    pub fn name(&self) -> String {
        match self {
            Suite::InDomain => "in-domain".into(),
            Suite::Spatial => "spatial".into(),
            Suite::Object => "object".into(),
            Suite::Visual => "visual".into(),
            Suite::Cluttered(k) => format!("cluttered-{k}"),
            Suite::Dynamic => "dynamic".into(),
        }
    }

    pub fn is_cluttered(&self) -> bool {
        matches!(self, Suite::Cluttered(_))
    }

    /// The scene used for training demonstrations and the in-domain suite.
    pub fn training_spec(ids: Vec<usize>) -> SceneSpec {
        SceneSpec {
            objects: vec![ObjectSpec {
                shape: ShapeSource::Catalog(ids),
                x: Range::new(-TRAIN_XY, TRAIN_XY),
                y: Range::new(-TRAIN_XY, TRAIN_XY),
                yaw: Range::new(-std::f64::consts::PI, std::f64::consts::PI),
                motion: MotionSpec::Static,
            }],
            render: RenderSettings::default(),
        }
    }

    pub fn spec(&self) -> SceneSpec {
        let train: Vec<usize> = TRAIN_OBJECTS.collect();
        let mut spec = Self::training_spec(train.clone());
        match self {
            Suite::InDomain => {}
            Suite::Spatial => {
                spec.objects[0].x = Range::new(-SPATIAL_XY, SPATIAL_XY);
                spec.objects[0].y = Range::new(-SPATIAL_XY, SPATIAL_XY);
            }
            Suite::Object => spec.objects[0].shape = ShapeSource::Catalog(NOVEL_OBJECTS.collect()),
            Suite::Visual => {
                spec.render = RenderSettings {
                    gain: 1.15,
                    noise: 0.01,
                }
            }
            Suite::Cluttered(k) => {
                let n = 2 * *k as usize;
                let o = spec.objects[0].clone();
                spec.objects = (0..n)
                    .map(|_| ObjectSpec {
                        x: Range::new(-0.16, 0.16),
                        y: Range::new(-0.16, 0.16),
                        ..o.clone()
                    })
                    .collect();
            }
            Suite::Dynamic => spec.objects[0].motion = MotionSpec::Linear(Range::new(0.003, 0.006)),
        }
        spec
    }
}

impl FromStr for Suite {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Suite> {
        match s {
            "in-domain" => Ok(Suite::InDomain),
            "spatial" => Ok(Suite::Spatial),
            "object" => Ok(Suite::Object),
            "visual" => Ok(Suite::Visual),
            "dynamic" => Ok(Suite::Dynamic),
            _ => s
                .strip_prefix("cluttered-")
                .and_then(|k| k.parse::<u8>().ok())
                .filter(|k| (1..=4).contains(k))
                .map(Suite::Cluttered)
                .ok_or_else(|| SimError::BadSpec(format!("unknown suite {s:?}"))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}
