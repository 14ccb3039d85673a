//! Heuristic pose selection: collision filter, grasp NMS, top-k by score, then
//! the candidate closest to the current end-effector pose under the weighted
//! SE(3) distance.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::geometry::{rotation_distance, weighted_distance, DistanceWeights, Pose};
use crate::graspsense::{GraspCandidate, GRIPPER_MAX_WIDTH};
use crate::simworld::{jaw_collides, Placed};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HpsError {
    #[error("no candidate survives filtering")]
    NoCandidates,
    #[error("invalid selector config: {0}")]
    BadConfig(String),
    #[error("unknown selection strategy {0:?}")]
    UnknownStrategy(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectorConfig {
    pub k: usize,
    pub weights: DistanceWeights,
    pub nms_trans: f64,
    pub nms_rot: f64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            k: 30,
            weights: DistanceWeights::default(),
            nms_trans: 0.02,
            nms_rot: 30f64.to_radians(),
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<(), HpsError> {
        if self.k == 0 {
            return Err(HpsError::BadConfig("k must be at least 1".into()));
        }
        if !(self.nms_trans > 0.0 && self.nms_rot > 0.0) {
            return Err(HpsError::BadConfig("NMS thresholds must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Hps,
    Random,
    Highest,
    Nearest,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Hps => "hps",
            Strategy::Random => "random",
            Strategy::Highest => "highest",
            Strategy::Nearest => "nearest",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = HpsError;
    fn from_str(s: &str) -> Result<Self, HpsError> {
        match s {
            "hps" => Ok(Strategy::Hps),
            "random" => Ok(Strategy::Random),
            "highest" => Ok(Strategy::Highest),
            "nearest" => Ok(Strategy::Nearest),
            _ => Err(HpsError::UnknownStrategy(s.to_string())),
        }
    }
}

/// Keeps candidates whose open jaws clear the table and every object.
pub fn collision_filter(cands: &[GraspCandidate], scene: &[Placed]) -> Vec<GraspCandidate> {
    cands
        .iter()
        .filter(|c| !jaw_collides(&c.pose, GRIPPER_MAX_WIDTH, scene, None))
        .copied()
        .collect()
}

/// Descending score, then the serialized pose, so the order never depends on input order.
fn canonical_cmp(a: &GraspCandidate, b: &GraspCandidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.pose.to_bytes().cmp(&b.pose.to_bytes()))
        .then_with(|| a.width.total_cmp(&b.width))
}

pub fn is_duplicate(a: &Pose, b: &Pose, config: &SelectorConfig) -> bool {
    (a.translation() - b.translation()).norm() <= config.nms_trans
        && rotation_distance(a.rotation(), b.rotation()) <= config.nms_rot
}

/// Greedy suppression in canonical order; a candidate within both thresholds
/// of an already kept one is dropped.
pub fn grasp_nms(cands: &[GraspCandidate], config: &SelectorConfig) -> Vec<GraspCandidate> {
    let mut sorted = cands.to_vec();
    sorted.sort_by(canonical_cmp);
    let mut kept: Vec<GraspCandidate> = Vec::new();
    for c in sorted {
        if !kept.iter().any(|k| is_duplicate(&k.pose, &c.pose, config)) {
            kept.push(c);
        }
    }
    kept
}

/// The `k` best-scored of an already canonically ordered list.
pub fn top_k(sorted: &[GraspCandidate], k: usize) -> &[GraspCandidate] {
    &sorted[..k.min(sorted.len())]
}

/// Index of the candidate nearest to `current`; ties go to the higher score,
/// then the lower index. Unmeasurable distances (near-π rotations) rank last.
pub fn argmin_distance(cands: &[GraspCandidate], current: &Pose, weights: &DistanceWeights) -> Option<usize> {
    let dist = |c: &GraspCandidate| weighted_distance(current, &c.pose, weights).unwrap_or(f64::INFINITY);
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in cands.iter().enumerate() {
        let d = dist(c);
        best = match best {
            None => Some((i, d)),
            Some((bi, bd)) => {
                if d < bd || (d == bd && c.score > cands[bi].score) {
                    Some((i, d))
                } else {
                    Some((bi, bd))
                }
            }
        };
    }
    best.map(|(i, _)| i)
}

/// Runs the full pipeline and picks one candidate with `strategy`.
pub fn select_with(
    cands: &[GraspCandidate],
    current: &Pose,
    scene: &[Placed],
    config: &SelectorConfig,
    strategy: Strategy,
    rng: &mut impl Rng,
) -> Result<GraspCandidate, HpsError> {
    config.validate()?;
    let free = collision_filter(cands, scene);
    let survivors = grasp_nms(&free, config);
    let pool = top_k(&survivors, config.k);
    if pool.is_empty() {
        return Err(HpsError::NoCandidates);
    }
    let i = match strategy {
        Strategy::Hps => argmin_distance(pool, current, &config.weights).ok_or(HpsError::NoCandidates)?,
        Strategy::Highest => 0,
        Strategy::Random => rng.random_range(0..pool.len()),
        Strategy::Nearest => pool
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                let da = (a.pose.translation() - current.translation()).norm();
                let db = (b.pose.translation() - current.translation()).norm();
                da.total_cmp(&db)
            })
            .map(|(i, _)| i)
            .unwrap_or(0),
    };
    Ok(pool[i])
}

/// Heuristic selection: filter, suppress, keep the top `k`, take the nearest.
pub fn select_grasp(
    cands: &[GraspCandidate],
    current: &Pose,
    scene: &[Placed],
    config: &SelectorConfig,
) -> Result<GraspCandidate, HpsError> {
    config.validate()?;
    let free = collision_filter(cands, scene);
    let survivors = grasp_nms(&free, config);
    let pool = top_k(&survivors, config.k);
    argmin_distance(pool, current, &config.weights)
        .map(|i| pool[i])
        .ok_or(HpsError::NoCandidates)
}
