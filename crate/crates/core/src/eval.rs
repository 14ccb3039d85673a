//! Closed-loop evaluation: run a policy in the simulator, record per-trial
//! outcomes and aggregate them into success rate, scene completion and grasp
//! frame error.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::action_vae::{ActionChunk, VaeError, VaeModel, ACTION_DIM};
use crate::datagen::plan_demo;
use crate::geometry::{weighted_distance, DistanceWeights, GeometryError, Pose};
use crate::graspsense::{detect_grasps, DetectorConfig, GraspCandidate};
use crate::hps::{select_with, HpsError, SelectorConfig, Strategy};
use crate::latent_diffusion::{stage_digest, DiffusionError, LdpModel, Observation};
use crate::netcore::step_seed;
use crate::simworld::{Frame, SimError, Suite, World, MAX_STEPS};

/// Grasp attempts allowed per cluttered scene.
pub const SCENE_ATTEMPTS: usize = 10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("checkpoints do not fit together: {0}")]
    CheckpointMismatch(String),
    #[error("no trial results")]
    EmptyResults,
    #[error("malformed results line {line}: {reason}")]
    BadRecord { line: usize, reason: String },
    #[error("invalid eval config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Selector(#[from] HpsError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// What a policy sees at the start of a control cycle.
#[derive(Debug, Clone, Copy)]
pub struct CycleInput<'a> {
    pub prev: &'a Frame,
    pub cur: &'a Frame,
    pub current: &'a Pose,
    pub guide: Option<&'a GraspCandidate>,
    pub seed: u64,
}

/// Maps one control-cycle input to an action chunk.
pub trait ChunkPolicy: Sync {
    fn act(&self, input: &CycleInput<'_>) -> Result<ActionChunk>;

    /// Stage names executed per cycle, used to fingerprint a configuration.
    fn stages(&self) -> Result<Vec<String>> {
        Ok(Vec::new())
    }
}

/// Encoder-free inference pipeline: sample a latent, decode it into actions.
#[derive(Debug, Clone)]
pub struct LatentPolicy {
    pub vae: VaeModel,
    pub ldp: LdpModel,
}

impl LatentPolicy {
    pub fn new(vae: VaeModel, ldp: LdpModel) -> Result<Self> {
        let v = vae.vae.config;
        let l = ldp.config();
        if v.latent_channels != l.latent_channels || v.latent_len() != l.latent_len {
            return Err(EvalError::CheckpointMismatch(format!(
                "action latent is {}x{}, denoiser expects {}x{}",
                v.latent_channels,
                v.latent_len(),
                l.latent_channels,
                l.latent_len
            )));
        }
        Ok(LatentPolicy { vae, ldp })
    }

    pub fn horizon(&self) -> usize {
        self.vae.vae.config.horizon
    }
}

impl ChunkPolicy for LatentPolicy {
    fn act(&self, input: &CycleInput<'_>) -> Result<ActionChunk> {
        let obs = Observation::from_frames(input.prev, input.cur, self.ldp.config().use_cue);
        let guide = input.guide.map(|g| g.pose);
        let z = self.ldp.sample(&obs, guide.as_ref(), input.seed)?;
        let guides: Vec<Pose> = guide.into_iter().collect();
        let decode_guides = (self.vae.vae.config.guided && !guides.is_empty()).then_some(guides.as_slice());
        if self.vae.vae.config.guided && decode_guides.is_none() {
            return Err(EvalError::BadConfig("latent-guided decoder needs a grasp".into()));
        }
        let chunks = self.vae.decode(&z, decode_guides)?;
        Ok(chunks.into_iter().next().expect("one chunk per latent"))
    }

    fn stages(&self) -> Result<Vec<String>> {
        let mut s = self.ldp.inference_stages()?;
        s.push(if self.vae.vae.config.guided {
            "vae.decode.guided".into()
        } else {
            "vae.decode".into()
        });
        Ok(s)
    }
}

/// Follows the planned demonstration toward the selected grasp.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedPolicy;

impl ChunkPolicy for ScriptedPolicy {
    fn act(&self, input: &CycleInput<'_>) -> Result<ActionChunk> {
        let g = input
            .guide
            .ok_or_else(|| EvalError::BadConfig("scripted policy needs a grasp".into()))?;
        let plan = plan_demo(input.current, &g.pose).map_err(|e| EvalError::BadConfig(e.to_string()))?;
        Ok(ActionChunk(plan))
    }
}

/// Holds the current pose with the gripper open.
#[derive(Debug, Clone, Copy, Default)]
pub struct HoldPolicy;

impl ChunkPolicy for HoldPolicy {
    fn act(&self, input: &CycleInput<'_>) -> Result<ActionChunk> {
        let mut a = [0.0; ACTION_DIM];
        a[..9].copy_from_slice(&input.current.to_vec9());
        a[9] = 1.0;
        Ok(ActionChunk(vec![a; 16]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub strategy: Strategy,
    pub selector: SelectorConfig,
    pub detector: DetectorConfig,
    pub detector_samples: usize,
    pub detect_once: bool,
    pub action_horizon: usize,
    /// Leading actions of each chunk that are skipped.
    pub discard: usize,
    pub max_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            strategy: Strategy::Hps,
            selector: SelectorConfig::default(),
            detector: DetectorConfig::default(),
            detector_samples: 48,
            detect_once: false,
            action_horizon: 8,
            discard: 0,
            max_steps: MAX_STEPS,
        }
    }
}

impl EvalConfig {
    pub fn dynamic() -> Self {
        EvalConfig {
            action_horizon: 4,
            ..EvalConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.action_horizon == 0 {
            return Err(EvalError::BadConfig("action horizon must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(EvalError::BadConfig("step limit must be positive".into()));
        }
        Ok(())
    }

    /// Stage names added by detection and selection.
    pub fn stages(&self) -> Vec<String> {
        let detect = if self.detect_once { "detect.once" } else { "detect.cycle" };
        vec![
            detect.to_string(),
            format!("select.{}", self.strategy.name()),
            format!("execute.{}+{}", self.discard, self.action_horizon),
        ]
    }
}

/// Checksum over every stage a policy run executes.
pub fn pipeline_digest(policy: &dyn ChunkPolicy, config: &EvalConfig) -> Result<String> {
    let mut stages = config.stages();
    stages.extend(policy.stages()?);
    Ok(stage_digest(&stages))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub suite: String,
    pub seed: u64,
    pub object: Option<usize>,
    pub success: bool,
    pub steps: usize,
    pub gfe: Option<f64>,
    pub selected: Option<GraspCandidate>,
}

/// Weighted SE(3) distance between the pose where the gripper began to close
/// and the grasp it was guided toward.
pub fn grasp_frame_error(closing: &Pose, grasp: &Pose, w: &DistanceWeights) -> Result<f64> {
    Ok(weighted_distance(closing, grasp, w)?)
}

fn select(world: &World, config: &EvalConfig, seed: u64, rng: &mut ChaCha8Rng) -> Option<GraspCandidate> {
    let points = world.surface_points();
    let cands = detect_grasps(&points, config.detector_samples, seed, &config.detector).ok()?;
    select_with(&cands, &world.gripper.pose, &world.bodies(), &config.selector, config.strategy, rng).ok()
}

/// Runs one attempt from the world's current state until success, collision
/// or the step limit. Observations are taken after every executed action so
/// the stacked previous frame is always one step old.
pub fn run_policy_episode(
    world: &mut World,
    policy: &dyn ChunkPolicy,
    config: &EvalConfig,
    seed: u64,
) -> Result<TrialResult> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e1e_c7ed);
    let mut cur = world.observe();
    let mut prev = cur.clone();
    let mut guide: Option<GraspCandidate> = None;
    let mut closing_guide: Option<GraspCandidate> = None;
    let mut steps = 0;
    let mut cycle = 0u64;
    while !world.is_done() && steps < config.max_steps {
        if guide.is_none() || !config.detect_once {
            if let Some(g) = select(world, config, step_seed(seed, cycle), &mut rng) {
                guide = Some(g);
            }
        }
        let input = CycleInput {
            prev: &prev,
            cur: &cur,
            current: &world.gripper.pose,
            guide: guide.as_ref(),
            seed: step_seed(seed ^ 0xd1ff, cycle),
        };
        let chunk = match (guide.is_some(), policy.act(&input)) {
            (_, Ok(c)) => c,
            (false, Err(EvalError::BadConfig(_))) => HoldPolicy.act(&input)?,
            (_, Err(e)) => return Err(e),
        };
        let planned = chunk.0.iter().skip(config.discard).take(config.action_horizon);
        let mut executed = 0;
        for a in planned {
            if world.is_done() || steps >= config.max_steps {
                break;
            }
            let before = world.gripper.closed;
            let r = world.step(a)?;
            if !before && r.grasp_frame_pose.is_some() && closing_guide.is_none() {
                closing_guide = guide;
            }
            steps += 1;
            executed += 1;
            prev = std::mem::replace(&mut cur, world.observe());
        }
        if executed == 0 {
            break;
        }
        cycle += 1;
    }
    let gfe = match (world.grasp_frame_pose(), closing_guide) {
        (Some(p), Some(g)) => Some(grasp_frame_error(&p, &g.pose, &config.selector.weights)?),
        _ => None,
    };
    let object = world.lifted_object().or(guide.and_then(|g| g.object));
    Ok(TrialResult {
        suite: String::new(),
        seed,
        object: object.and_then(|i| world.objects.get(i)).and_then(|o| o.catalog_id),
        success: world.success(),
        steps,
        gfe,
        selected: closing_guide.or(guide),
    })
}

/// Seed of trial `i` in a suite run.
pub fn trial_seed(master: u64, i: usize) -> u64 {
    step_seed(master ^ 0xe7a1_5eed, i as u64)
}

/// Single-target trials of `suite`, one per index, run on `threads` workers
/// and returned in index order.
pub fn run_suite(
    policy: &dyn ChunkPolicy,
    suite: Suite,
    trials: usize,
    master_seed: u64,
    config: &EvalConfig,
    threads: usize,
) -> Result<Vec<TrialResult>> {
    let spec = suite.spec();
    let name = suite.name();
    let run = |i: usize| -> Result<TrialResult> {
        let seed = trial_seed(master_seed, i);
        let mut world = World::spawn(&spec, seed)?;
        let mut r = run_policy_episode(&mut world, policy, config, seed)?;
        r.suite = name.clone();
        Ok(r)
    };
    parallel_map(trials, threads, run).into_iter().collect()
}

fn parallel_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let per = n.div_ceil(threads);
    std::thread::scope(|s| {
        for (t, chunk) in slots.chunks_mut(per).enumerate() {
            let f = &f;
            s.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(f(t * per + k));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

/// Outcome of one cluttered scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneResult {
    pub suite: String,
    pub seed: u64,
    pub objects: usize,
    pub cleared: usize,
}

/// Attempts grasps until the table is clear or the attempt budget is spent.
pub fn run_scene(
    world: &mut World,
    policy: &dyn ChunkPolicy,
    config: &EvalConfig,
    seed: u64,
    attempts: usize,
) -> Result<(SceneResult, Vec<TrialResult>)> {
    let objects = world.active_objects().count();
    let mut trials = Vec::new();
    let mut cleared = 0;
    for a in 0..attempts {
        if world.active_objects().count() == 0 {
            break;
        }
        let r = run_policy_episode(world, policy, config, step_seed(seed, a as u64))?;
        cleared += r.success as usize;
        trials.push(r);
        world.reset_attempt();
    }
    let scene = SceneResult {
        suite: String::new(),
        seed,
        objects,
        cleared,
    };
    Ok((scene, trials))
}

/// Cluttered scenes of `suite`; trials are returned flattened in scene order.
pub fn run_cluttered_suite(
    policy: &dyn ChunkPolicy,
    suite: Suite,
    scenes: usize,
    master_seed: u64,
    config: &EvalConfig,
    threads: usize,
) -> Result<(Vec<SceneResult>, Vec<TrialResult>)> {
    let spec = suite.spec();
    let name = suite.name();
    let run = |i: usize| -> Result<(SceneResult, Vec<TrialResult>)> {
        let seed = trial_seed(master_seed, i);
        let mut world = World::spawn(&spec, seed)?;
        let (mut scene, mut trials) = run_scene(&mut world, policy, config, seed, SCENE_ATTEMPTS)?;
        scene.suite = name.clone();
        trials.iter_mut().for_each(|t| t.suite = name.clone());
        Ok((scene, trials))
    };
    let mut scenes = Vec::with_capacity(scenes);
    let mut trials = Vec::new();
    for r in parallel_map(scenes.capacity(), threads, run) {
        let (s, t) = r?;
        scenes.push(s);
        trials.extend(t);
    }
    Ok((scenes, trials))
}

/// Percentage of successful trials.
pub fn success_rate(results: &[TrialResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    let ok = results.iter().filter(|r| r.success).count();
    Ok(100.0 * ok as f64 / results.len() as f64)
}

/// Percentage of objects cleared over all scenes.
pub fn scene_completion_rate(scenes: &[SceneResult]) -> Result<f64> {
    let total: usize = scenes.iter().map(|s| s.objects).sum();
    if total == 0 {
        return Err(EvalError::EmptyResults);
    }
    let cleared: usize = scenes.iter().map(|s| s.cleared).sum();
    Ok(100.0 * cleared as f64 / total as f64)
}

/// Mean grasp frame error over trials where the gripper closed.
pub fn mean_gfe(results: &[TrialResult]) -> Option<f64> {
    let v: Vec<f64> = results.iter().filter_map(|r| r.gfe).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl fmt::Display for TrialResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
        write!(
            f,
            "suite={} seed={} object={} success={} steps={} gfe={} grasp={}",
            self.suite,
            self.seed,
            opt(self.object.map(|o| o.to_string())),
            self.success as u8,
            self.steps,
            opt(self.gfe.map(|g| g.to_string())),
            opt(self.selected.map(|g| hex::encode(encode_candidate(&g)))),
        )
    }
}

fn encode_candidate(c: &GraspCandidate) -> Vec<u8> {
    let mut out = c.pose.to_bytes().to_vec();
    out.extend_from_slice(&c.score.to_le_bytes());
    out.extend_from_slice(&c.width.to_le_bytes());
    out
}

fn decode_candidate(b: &[u8]) -> std::result::Result<GraspCandidate, String> {
    use crate::geometry::POSE_BYTES;
    if b.len() != POSE_BYTES + 16 {
        return Err(format!("grasp record of {} bytes", b.len()));
    }
    let pose = Pose::from_bytes(&b[..POSE_BYTES]).map_err(|e| e.to_string())?;
    let f = |o: usize| f64::from_le_bytes(b[o..o + 8].try_into().expect("8 bytes"));
    Ok(GraspCandidate {
        pose,
        score: f(POSE_BYTES),
        width: f(POSE_BYTES + 8),
        object: None,
    })
}

impl FromStr for TrialResult {
    type Err = String;

    fn from_str(line: &str) -> std::result::Result<Self, String> {
        let mut fields = std::collections::BTreeMap::new();
        for part in line.split_whitespace() {
            let (k, v) = part.split_once('=').ok_or_else(|| format!("field {part:?} lacks '='"))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| format!("missing {k}"));
        let opt = |k: &str| -> std::result::Result<Option<&str>, String> { get(k).map(|v| (v != "-").then_some(v)) };
        let num = |k: &str, v: &str| v.parse::<f64>().map_err(|e| format!("{k}: {e}"));
        Ok(TrialResult {
            suite: get("suite")?.to_string(),
            seed: get("seed")?.parse().map_err(|e| format!("seed: {e}"))?,
            object: opt("object")?.map(|v| v.parse().map_err(|e| format!("object: {e}"))).transpose()?,
            success: match get("success")? {
                "1" => true,
                "0" => false,
                v => return Err(format!("success flag {v:?}")),
            },
            steps: get("steps")?.parse().map_err(|e| format!("steps: {e}"))?,
            gfe: opt("gfe")?.map(|v| num("gfe", v)).transpose()?,
            selected: opt("grasp")?
                .map(|v| hex::decode(v).map_err(|e| e.to_string()).and_then(|b| decode_candidate(&b)))
                .transpose()?,
        })
    }
}

impl fmt::Display for SceneResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "scene suite={} seed={} objects={} cleared={}",
            self.suite, self.seed, self.objects, self.cleared
        )
    }
}

impl FromStr for SceneResult {
    type Err = String;

    fn from_str(line: &str) -> std::result::Result<Self, String> {
        let rest = line.strip_prefix("scene ").ok_or("scene record must start with 'scene'")?;
        let mut fields = std::collections::BTreeMap::new();
        for part in rest.split_whitespace() {
            let (k, v) = part.split_once('=').ok_or_else(|| format!("field {part:?} lacks '='"))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| format!("missing {k}"));
        let int = |k: &str| -> std::result::Result<u64, String> { get(k)?.parse().map_err(|e| format!("{k}: {e}")) };
        let scene = SceneResult {
            suite: get("suite")?.to_string(),
            seed: int("seed")?,
            objects: int("objects")? as usize,
            cleared: int("cleared")? as usize,
        };
        if scene.cleared > scene.objects {
            return Err("more objects cleared than placed".into());
        }
        Ok(scene)
    }
}

/// Parsed contents of a results file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultsFile {
    pub trials: Vec<TrialResult>,
    pub scenes: Vec<SceneResult>,
}

impl ResultsFile {
    pub fn extend(&mut self, other: ResultsFile) {
        self.trials.extend(other.trials);
        self.scenes.extend(other.scenes);
    }
}

/// Header comments, then one record per line: scenes first, then trials.
pub fn format_results(header: &[(String, String)], results: &ResultsFile) -> String {
    let mut out: String = header.iter().map(|(k, v)| format!("# {k}={v}\n")).collect();
    out.extend(results.scenes.iter().map(|s| format!("{s}\n")));
    out.extend(results.trials.iter().map(|r| format!("{r}\n")));
    out
}

/// Parses a results file; blank lines and `#` comments are skipped.
pub fn parse_results(text: &str) -> Result<ResultsFile> {
    let mut file = ResultsFile::default();
    for (i, l) in text.lines().enumerate() {
        let l = l.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let bad = |reason| EvalError::BadRecord { line: i + 1, reason };
        if l.starts_with("scene ") {
            file.scenes.push(l.parse().map_err(bad)?);
        } else {
            file.trials.push(l.parse().map_err(bad)?);
        }
    }
    Ok(file)
}

/// Per-suite table of trials, SR, mean GFE and scene completion, in
/// first-seen suite order.
pub fn report_table(results: &ResultsFile) -> Result<String> {
    if results.trials.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    let mut suites: Vec<&str> = Vec::new();
    for r in &results.trials {
        if !suites.contains(&r.suite.as_str()) {
            suites.push(&r.suite);
        }
    }
    let mut out = format!("{:<14} {:>7} {:>8} {:>9} {:>8}\n", "suite", "trials", "SR(%)", "GFE", "SCR(%)");
    for s in suites {
        let rows: Vec<TrialResult> = results.trials.iter().filter(|r| r.suite == s).cloned().collect();
        let scenes: Vec<SceneResult> = results.scenes.iter().filter(|r| r.suite == s).cloned().collect();
        let gfe = mean_gfe(&rows).map_or("-".to_string(), |g| format!("{g:.3}"));
        let scr = scene_completion_rate(&scenes).map_or("-".to_string(), |v| format!("{v:.1}"));
        out.push_str(&format!(
            "{:<14} {:>7} {:>8.1} {:>9} {:>8}\n",
            s,
            rows.len(),
            success_rate(&rows)?,
            gfe,
            scr
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn trial(success: bool, gfe: Option<f64>) -> TrialResult {
        TrialResult {
            suite: "in-domain".into(),
            seed: 1,
            object: Some(2),
            success,
            steps: 20,
            gfe,
            selected: None,
        }
    }

    #[test]
    fn rates() {
        assert!(matches!(success_rate(&[]), Err(EvalError::EmptyResults)));
        assert_eq!(success_rate(&[trial(true, None), trial(true, None)]).unwrap(), 100.0);
        let s = SceneResult {
            suite: "cluttered-2".into(),
            seed: 0,
            objects: 5,
            cleared: 3,
        };
        assert_eq!(scene_completion_rate(&[s]).unwrap(), 60.0);
    }

    #[test]
    fn gfe_examples() {
        let w = DistanceWeights::default();
        let p = Pose::from_translation(Vector3::new(0.1, 0.2, 0.3));
        assert_eq!(grasp_frame_error(&p, &p, &w).unwrap(), 0.0);
        let q = Pose::from_translation(Vector3::new(0.11, 0.2, 0.3));
        assert!((grasp_frame_error(&p, &q, &w).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn results_round_trip() {
        let g = GraspCandidate {
            pose: Pose::from_axis_angle(&Vector3::x(), 3.0, Vector3::new(0.01, -0.02, 0.03)),
            score: 0.75,
            width: 0.04,
            object: None,
        };
        let mut a = trial(true, Some(1.0 / 3.0));
        a.selected = Some(g);
        let b = trial(false, None);
        let file = ResultsFile {
            trials: vec![a, b],
            scenes: vec![SceneResult {
                suite: "cluttered-1".into(),
                seed: 4,
                objects: 2,
                cleared: 1,
            }],
        };
        let text = format_results(&[("seed".into(), "3".into())], &file);
        assert!(text.starts_with("# seed=3\n"));
        assert_eq!(parse_results(&text).unwrap(), file);
        assert!(report_table(&file).unwrap().contains("50.0"));
        assert!(matches!(report_table(&ResultsFile::default()), Err(EvalError::EmptyResults)));
        assert!(matches!(parse_results("suite=x seed=1"), Err(EvalError::BadRecord { line: 1, .. })));
    }

    #[test]
    fn scripted_policy_succeeds_and_hold_times_out() {
        let spec = Suite::InDomain.spec();
        let cfg = EvalConfig {
            action_horizon: MAX_STEPS,
            ..EvalConfig::default()
        };
        let mut ok = 0;
        for seed in 0..5 {
            let mut w = World::spawn(&spec, seed).unwrap();
            let r = run_policy_episode(&mut w, &ScriptedPolicy, &cfg, seed).unwrap();
            ok += r.success as usize;
            if r.success {
                assert!(r.gfe.unwrap() < 1e-3);
            }
        }
        assert!(ok >= 4, "{ok}/5");
        let mut w = World::spawn(&spec, 0).unwrap();
        let r = run_policy_episode(&mut w, &HoldPolicy, &cfg, 0).unwrap();
        assert!(!r.success);
        assert_eq!(r.steps, MAX_STEPS);
        assert_eq!(r.gfe, None);
    }

    #[test]
    fn episodes_are_deterministic() {
        let spec = Suite::InDomain.spec();
        let cfg = EvalConfig {
            action_horizon: MAX_STEPS,
            ..EvalConfig::default()
        };
        let a = run_policy_episode(&mut World::spawn(&spec, 9).unwrap(), &ScriptedPolicy, &cfg, 9).unwrap();
        let b = run_policy_episode(&mut World::spawn(&spec, 9).unwrap(), &ScriptedPolicy, &cfg, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stage_digest_tracks_flags() {
        let base = EvalConfig::default();
        let once = EvalConfig {
            detect_once: true,
            ..base.clone()
        };
        let a = pipeline_digest(&ScriptedPolicy, &base).unwrap();
        assert_ne!(a, pipeline_digest(&ScriptedPolicy, &once).unwrap());
        assert_eq!(a, pipeline_digest(&ScriptedPolicy, &base).unwrap());
    }
}
