//! Denoising diffusion over action latents: noise schedule, the conditional
//! temporal UNet with its observation encoder, the auxiliary cue
//! reconstruction head, the training objective and DDIM sampling.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::action_vae::{GraspCondition, POSE_DIM, TRANSLATION_SCALE};
use crate::geometry::Pose;
use crate::graspsense::{apply_visual_cue, GraspnessMap, Raster, DEFAULT_CUE_THRESHOLD, MASKED_COLOR};
use crate::netcore::{
    sinusoidal_embedding, step_seed, AdamW, AdamWConfig, Checkpoint, CheckpointError, Conv1d, Conv2d,
    ConvTranspose2d, CosineSchedule, Ema, EmaConfig, GroupNorm, Linear, NetError, ParamStore, Real, Tape, Tensor,
    Var,
};
use crate::simworld::Frame;

pub const IMAGE_SIZE: usize = 64;
pub const OBS_STEPS: usize = 2;
/// Wrist `[depth, cue]` and agent `[depth]` for each stacked step.
pub const IMAGE_CHANNELS: usize = 3 * OBS_STEPS;
pub const PROPRIO_DIM: usize = 10 * OBS_STEPS;
pub const CUE_CHANNELS: usize = 2;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("timestep {k} outside 1..={max}")]
    IndexOutOfRange { k: usize, max: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dataset has no training samples")]
    EmptyDataset,
    #[error("a frozen action autoencoder is required")]
    MissingVae,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, DiffusionError>;

/// Cumulative signal levels `alpha_bar[0..=K]`, `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;
/// Bound on the clean-latent estimate during sampling, in normalized units.
pub const SAMPLE_CLIP: f64 = 1.0;
const MAX_BETA: f64 = 0.999;

impl NoiseSchedule {
    /// Squared-cosine schedule with per-step noise capped at 0.999.
    pub fn squared_cosine(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(DiffusionError::BadConfig(format!("need at least 2 timesteps, got {k}")));
        }
        let f = |t: f64| {
            let a = (t / k as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
            a.cos().powi(2)
        };
        let mut alpha_bar = Vec::with_capacity(k + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for i in 1..=k {
            let beta = (1.0 - f(i as f64) / f(i as f64 - 1.0)).min(MAX_BETA);
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return Err(DiffusionError::IndexOutOfRange { k, max: self.steps() });
        }
        Ok(())
    }

    /// Signal and noise multipliers of the forward marginal at step `k`.
    pub fn coefficients(&self, k: usize) -> Result<(f64, f64)> {
        self.check(k)?;
        let a = self.alpha_bar[k];
        Ok((a.sqrt(), (1.0 - a).sqrt()))
    }

    /// Evenly spaced descending sub-schedule ending before step 0, starting at `K`.
    pub fn inference_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        let k = self.steps();
        if n == 0 || n > k {
            return Err(DiffusionError::BadConfig(format!("{n} inference steps for {k} training steps")));
        }
        Ok((0..n)
            .map(|i| ((k as f64) * (1.0 - i as f64 / n as f64)).round() as usize)
            .collect())
    }
}

/// `sqrt(ab_k)·z0 + sqrt(1 − ab_k)·eps`.
pub fn q_sample<F: Real>(z0: &Tensor<F>, k: usize, eps: &Tensor<F>, sched: &NoiseSchedule) -> Result<Tensor<F>> {
    let (a, b) = sched.coefficients(k)?;
    if z0.shape() != eps.shape() {
        return Err(DiffusionError::ShapeMismatch(format!("{:?} vs {:?}", z0.shape(), eps.shape())));
    }
    let data = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| F::from_f64(a * z.to_f64() + b * e.to_f64()))
        .collect();
    Ok(Tensor::from_vec(z0.shape(), data)?)
}

/// Deterministic DDIM from `x_k` at the first of `timesteps` down to step 0.
/// `eps_fn(x, k)` predicts the noise at step `k`; the clean estimate is
/// clamped to `[-clip, clip]` when `clip` is set.
pub fn ddim_loop(
    x: Tensor<f64>,
    sched: &NoiseSchedule,
    timesteps: &[usize],
    clip: Option<f64>,
    mut eps_fn: impl FnMut(&Tensor<f64>, usize) -> Result<Tensor<f64>>,
) -> Result<Tensor<f64>> {
    let mut x = x;
    for (i, &k) in timesteps.iter().enumerate() {
        sched.check(k)?;
        let ab = sched.alpha_bar(k);
        let ab_prev = timesteps.get(i + 1).map_or(1.0, |&p| sched.alpha_bar(p));
        let eps = eps_fn(&x, k)?;
        if eps.shape() != x.shape() {
            return Err(DiffusionError::ShapeMismatch(format!("noise prediction {:?}", eps.shape())));
        }
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        let data = x
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&xv, &e)| {
                let x0 = (xv - sb * e) / sa;
                let x0 = clip.map_or(x0, |c| x0.clamp(-c, c));
                let e = if clip.is_some() { (xv - sa * x0) / sb } else { e };
                pa * x0 + pb * e
            })
            .collect();
        x = Tensor::from_vec(x.shape(), data)?;
    }
    Ok(x)
}

pub fn gaussian_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("shape matches length")
}

/// Stacked network inputs for one decision step.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// `[IMAGE_CHANNELS, 64, 64]`: per step wrist depth, wrist cue, agent depth.
    pub images: Vec<f32>,
    pub proprio: [f32; PROPRIO_DIM],
    /// Cue-masked wrist raster of the latest step, the reconstruction target.
    pub cue_target: Vec<f32>,
}

/// Wrist `[depth, cue]` raster of a frame. Without the cue the second
/// channel is zero; with it, pixels above the graspness threshold take the
/// mask colour.
pub fn wrist_input(frame: &Frame, use_cue: bool) -> Raster {
    let w = &frame.wrist;
    let mut base = Raster::filled(w.height, w.width, CUE_CHANNELS, 0.0);
    base.channel_mut(0).copy_from_slice(w.channel(0));
    if !use_cue {
        return base;
    }
    let g = w.channel(1);
    let map = GraspnessMap {
        height: w.height,
        width: w.width,
        values: g.iter().map(|&v| v as f64).collect(),
        depth: vec![0.0; g.len()],
        valid: g.iter().map(|&v| v > 0.0).collect(),
    };
    apply_visual_cue(&base, &map, DEFAULT_CUE_THRESHOLD, &MASKED_COLOR).expect("channel counts agree")
}

impl Observation {
    /// Builds the bundle from the previous and current frames.
    pub fn from_frames(prev: &Frame, cur: &Frame, use_cue: bool) -> Self {
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        let mut images = Vec::with_capacity(IMAGE_CHANNELS * plane);
        let mut proprio = [0.0f32; PROPRIO_DIM];
        let mut cue_target = Vec::new();
        for (s, f) in [prev, cur].into_iter().enumerate() {
            let w = wrist_input(f, use_cue);
            images.extend_from_slice(&w.data);
            images.extend_from_slice(f.agent.channel(0));
            for (i, &v) in f.proprio.iter().enumerate() {
                let v = if i < 3 { v * TRANSLATION_SCALE } else { v };
                proprio[s * 10 + i] = v as f32;
            }
            if s == OBS_STEPS - 1 {
                cue_target = w.data;
            }
        }
        Observation {
            images,
            proprio,
            cue_target,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdpConfig {
    pub latent_channels: usize,
    pub latent_len: usize,
    pub down_dims: Vec<usize>,
    pub kernel_size: usize,
    pub n_groups: usize,
    pub step_embed_dim: usize,
    pub obs_feature_dim: usize,
    pub train_timesteps: usize,
    pub inference_steps: usize,
    /// Cue channel fed to the observation encoder.
    pub use_cue: bool,
    pub use_recon: bool,
    pub recon_weight: f64,
    /// Grasp pose appended to the denoiser condition.
    pub condition_guidance: bool,
}

impl Default for LdpConfig {
    fn default() -> Self {
        LdpConfig {
            latent_channels: 16,
            latent_len: 8,
            down_dims: vec![32, 64, 128],
            kernel_size: 5,
            n_groups: 8,
            step_embed_dim: 64,
            obs_feature_dim: 64,
            train_timesteps: 100,
            inference_steps: 10,
            use_cue: true,
            use_recon: true,
            recon_weight: 0.2,
            condition_guidance: false,
        }
    }
}

fn parse_dims(s: &str) -> Option<Vec<usize>> {
    let inner = s.trim().strip_prefix('[')?.strip_suffix(']')?;
    inner.split(',').map(|p| p.trim().parse().ok()).collect()
}

fn format_dims(d: &[usize]) -> String {
    let parts: Vec<String> = d.iter().map(usize::to_string).collect();
    format!("[{}]", parts.join(","))
}

impl LdpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DiffusionError::BadConfig(m));
        if self.down_dims.is_empty() {
            return bad("unet.down_dims is empty".into());
        }
        if let Some(d) = self.down_dims.iter().find(|&&d| d == 0 || d % self.n_groups.max(1) != 0) {
            return bad(format!("width {d} not divisible by {} groups", self.n_groups));
        }
        let levels = self.down_dims.len() as u32;
        if self.latent_len % 2usize.pow(levels - 1) != 0 {
            return bad(format!("latent length {} too short for {levels} levels", self.latent_len));
        }
        if self.kernel_size % 2 == 0 {
            return bad("unet.kernel_size must be odd".into());
        }
        if self.step_embed_dim < 2 || self.step_embed_dim % 2 != 0 {
            return bad("diffusion step embedding must be even".into());
        }
        if self.inference_steps == 0 || self.inference_steps > self.train_timesteps {
            return bad("inference steps must lie in 1..=training steps".into());
        }
        if self.use_recon && !self.use_cue {
            return bad("cue reconstruction needs the cue channel".into());
        }
        if !(self.recon_weight >= 0.0) {
            return bad("recon_loss_weight must be ≥ 0".into());
        }
        Ok(())
    }

    pub fn write_manifest(&self, ck: &mut Checkpoint) {
        ck.set("n_latent_dims", self.latent_channels);
        ck.set("latent_length", self.latent_len);
        ck.set("unet.down_dims", format_dims(&self.down_dims));
        ck.set("unet.kernel_size", self.kernel_size);
        ck.set("unet.n_groups", self.n_groups);
        ck.set("unet.diffusion_step_embed_dim", self.step_embed_dim);
        ck.set("obs_feature_dim", self.obs_feature_dim);
        ck.set("num_training_timesteps", self.train_timesteps);
        ck.set("num_inference_timesteps", self.inference_steps);
        ck.set("use_cue", self.use_cue);
        ck.set("use_recon", self.use_recon);
        ck.set("recon_loss_weight", self.recon_weight);
        ck.set("condition_guidance", self.condition_guidance);
    }

    pub fn from_manifest(ck: &Checkpoint) -> Result<Self> {
        let dims = ck.get("unet.down_dims").unwrap_or_default();
        let c = LdpConfig {
            latent_channels: ck.get_parsed("n_latent_dims")?,
            latent_len: ck.get_parsed("latent_length")?,
            down_dims: parse_dims(dims)
                .ok_or_else(|| CheckpointError::Corrupt(format!("unet.down_dims={dims}")))?,
            kernel_size: ck.get_parsed("unet.kernel_size")?,
            n_groups: ck.get_parsed("unet.n_groups")?,
            step_embed_dim: ck.get_parsed("unet.diffusion_step_embed_dim")?,
            obs_feature_dim: ck.get_parsed("obs_feature_dim")?,
            train_timesteps: ck.get_parsed("num_training_timesteps")?,
            inference_steps: ck.get_parsed("num_inference_timesteps")?,
            use_cue: ck.get_parsed("use_cue")?,
            use_recon: ck.get_parsed("use_recon")?,
            recon_weight: ck.get_parsed("recon_loss_weight")?,
            condition_guidance: ck.get_parsed("condition_guidance")?,
        };
        c.validate()?;
        Ok(c)
    }

    fn cond_dim(&self) -> usize {
        let g = if self.condition_guidance { POSE_DIM } else { 0 };
        self.step_embed_dim + self.obs_feature_dim + g
    }
}

const PROPRIO_FEATURES: usize = 32;

/// Small strided conv stack over the stacked rasters plus a dense proprio embedding.
#[derive(Debug, Clone, Copy)]
pub struct ObsEncoder {
    patch: Conv2d,
    mid: Conv2d,
    last: Conv2d,
    image_proj: Linear,
    proprio_proj: Linear,
}

impl ObsEncoder {
    pub fn new<F: Real>(store: &mut ParamStore<F>, out: usize, rng: &mut impl Rng) -> Result<Self> {
        let image_out = out.saturating_sub(PROPRIO_FEATURES).max(1);
        Ok(ObsEncoder {
            patch: Conv2d::new(store, "obs.patch", IMAGE_CHANNELS, 16, 4, 4, 0, rng)?,
            mid: Conv2d::new(store, "obs.mid", 16, 32, 3, 2, 1, rng)?,
            last: Conv2d::new(store, "obs.last", 32, 32, 3, 2, 1, rng)?,
            image_proj: Linear::new(store, "obs.image_proj", 32 * 4 * 4, image_out, rng)?,
            proprio_proj: Linear::new(store, "obs.proprio_proj", PROPRIO_DIM, out - image_out, rng)?,
        })
    }

    /// `images[N, C, 64, 64]`, `proprio[N, 20]` → `[N, out]`.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, images: Var, proprio: Var) -> Result<Var> {
        tape.mark("obs.encode");
        let n = tape.shape(images)[0];
        let h = self.patch.forward(tape, store, images)?;
        let h = tape.silu(h);
        let h = self.mid.forward(tape, store, h)?;
        let h = tape.silu(h);
        let h = self.last.forward(tape, store, h)?;
        let h = tape.silu(h);
        let h = tape.reshape(h, &[n, 32 * 4 * 4])?;
        let img = self.image_proj.forward(tape, store, h)?;
        let pro = self.proprio_proj.forward(tape, store, proprio)?;
        let both = tape.concat(&[img, pro])?;
        Ok(tape.silu(both))
    }
}

/// Conv → GroupNorm → SiLU, twice, with a FiLM modulation from the condition
/// after the first stage and a residual connection.
#[derive(Debug, Clone, Copy)]
struct ResBlock {
    conv1: Conv1d,
    norm1: GroupNorm,
    conv2: Conv1d,
    norm2: GroupNorm,
    film: Linear,
    skip: Option<Conv1d>,
    out: usize,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        out: usize,
        cond: usize,
        k: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(ResBlock {
            conv1: Conv1d::new(store, &format!("{name}.conv1"), input, out, k, 1, rng)?,
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), out, groups)?,
            conv2: Conv1d::new(store, &format!("{name}.conv2"), out, out, k, 1, rng)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), out, groups)?,
            film: Linear::new(store, &format!("{name}.film"), cond, 2 * out, rng)?,
            skip: if input != out {
                Some(Conv1d::new(store, &format!("{name}.skip"), input, out, 1, 1, rng)?)
            } else {
                None
            },
            out,
        })
    }

    fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var, cond: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, store, x)?;
        let h = self.norm1.forward(tape, store, h)?;
        let h = tape.silu(h);
        let ss = self.film.forward(tape, store, cond)?;
        let scale = tape.slice(ss, 0, self.out)?;
        let shift = tape.slice(ss, self.out, self.out)?;
        let h = tape.film(h, scale, shift)?;
        let h = self.conv2.forward(tape, store, h)?;
        let h = self.norm2.forward(tape, store, h)?;
        let h = tape.silu(h);
        let r = match self.skip {
            Some(s) => s.forward(tape, store, x)?,
            None => x,
        };
        Ok(tape.add(h, r)?)
    }
}

/// Transposed-conv stack from bottleneck features to a wrist cue raster.
#[derive(Debug, Clone)]
pub struct ReconHead {
    proj: Linear,
    ups: Vec<ConvTranspose2d>,
}

const RECON_SEED_SIDE: usize = 4;
const RECON_SEED_CHANNELS: usize = 16;

impl ReconHead {
    pub fn new<F: Real>(store: &mut ParamStore<F>, features: usize, rng: &mut impl Rng) -> Result<Self> {
        let side = RECON_SEED_SIDE;
        let proj = Linear::new(store, "recon.proj", features, RECON_SEED_CHANNELS * side * side, rng)?;
        let widths = [RECON_SEED_CHANNELS, 16, 8, 8, CUE_CHANNELS];
        let ups = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| ConvTranspose2d::new(store, &format!("recon.up{i}"), w[0], w[1], 4, 2, 1, rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(ReconHead { proj, ups })
    }

    /// `features[N, C, L]` → `[N, 2, 64, 64]`.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, features: Var) -> Result<Var> {
        tape.mark("recon.head");
        let s = tape.shape(features).to_vec();
        let n = s[0];
        let flat = tape.reshape(features, &[n, s[1..].iter().product()])?;
        let h = self.proj.forward(tape, store, flat)?;
        let mut h = tape.reshape(h, &[n, RECON_SEED_CHANNELS, RECON_SEED_SIDE, RECON_SEED_SIDE])?;
        for up in &self.ups {
            h = tape.silu(h);
            h = up.forward(tape, store, h)?;
        }
        Ok(h)
    }
}

/// Output of one denoiser pass.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserOutput {
    pub eps_hat: Var,
    pub mid_features: Var,
}

/// Temporal UNet noise predictor with observation encoder and optional recon head.
#[derive(Debug, Clone)]
pub struct LatentDenoiser {
    pub config: LdpConfig,
    step_mlp: (Linear, Linear),
    obs: ObsEncoder,
    down: Vec<(ResBlock, Option<Conv1d>)>,
    mid: ResBlock,
    up: Vec<(Conv1d, ResBlock)>,
    final_block: Conv1d,
    final_proj: Conv1d,
    recon: Option<ReconHead>,
}

impl LatentDenoiser {
    pub fn new<F: Real>(config: LdpConfig, store: &mut ParamStore<F>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.step_embed_dim;
        let step_mlp = (
            Linear::new(store, "unet.step.0", d, 2 * d, rng)?,
            Linear::new(store, "unet.step.1", 2 * d, d, rng)?,
        );
        let obs = ObsEncoder::new(store, c.obs_feature_dim, rng)?;
        let cond = c.cond_dim();
        let (k, g) = (c.kernel_size, c.n_groups);
        let mut down = Vec::new();
        let mut prev = c.latent_channels;
        for (i, &w) in c.down_dims.iter().enumerate() {
            let block = ResBlock::new(store, &format!("unet.down{i}"), prev, w, cond, k, g, rng)?;
            let pool = if i + 1 < c.down_dims.len() {
                Some(Conv1d::new(store, &format!("unet.pool{i}"), w, w, 3, 2, rng)?)
            } else {
                None
            };
            down.push((block, pool));
            prev = w;
        }
        let mid = ResBlock::new(store, "unet.mid", prev, prev, cond, k, g, rng)?;
        let mut up = Vec::new();
        for i in (0..c.down_dims.len() - 1).rev() {
            let (wi, wn) = (c.down_dims[i], c.down_dims[i + 1]);
            let conv = Conv1d::new(store, &format!("unet.upconv{i}"), wn, wn, 3, 1, rng)?;
            let block = ResBlock::new(store, &format!("unet.up{i}"), wn + wi, wi, cond, k, g, rng)?;
            up.push((conv, block));
        }
        let w0 = c.down_dims[0];
        let final_block = Conv1d::new(store, "unet.final.0", w0, w0, k, 1, rng)?;
        let final_proj = Conv1d::new(store, "unet.final.1", w0, c.latent_channels, 1, 1, rng)?;
        let recon = if c.use_recon {
            let last = *c.down_dims.last().expect("validated non-empty");
            let len = c.latent_len >> (c.down_dims.len() - 1);
            Some(ReconHead::new(store, last * len, rng)?)
        } else {
            None
        };
        Ok(LatentDenoiser {
            config,
            step_mlp,
            obs,
            down,
            mid,
            up,
            final_block,
            final_proj,
            recon,
        })
    }

    pub fn recon_head(&self) -> Option<&ReconHead> {
        self.recon.as_ref()
    }

    /// Observation features `[N, obs_feature_dim]`, plus the grasp pose when
    /// condition guidance is on.
    pub fn encode_obs<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        images: Var,
        proprio: Var,
        guides: Option<&[Pose]>,
    ) -> Result<Var> {
        let feats = self.obs.forward(tape, store, images, proprio)?;
        if !self.config.condition_guidance {
            return Ok(feats);
        }
        let n = tape.shape(feats)[0];
        let g = guides
            .filter(|g| g.len() == n)
            .ok_or_else(|| DiffusionError::ShapeMismatch("condition guidance needs one grasp per row".into()))?;
        let data = g
            .iter()
            .flat_map(|p| GraspCondition::from_pose(p).scaled())
            .map(F::from_f64)
            .collect();
        let gv = tape.leaf(Tensor::from_vec(&[n, POSE_DIM], data)?);
        tape.mark("condition.grasp");
        Ok(tape.concat(&[feats, gv])?)
    }

    /// Noise prediction for `z_k[N, C, L]` at per-row steps `k`, given observation features.
    pub fn denoise<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        z: Var,
        steps: &[usize],
        obs_features: Var,
    ) -> Result<DenoiserOutput> {
        let c = &self.config;
        let s = tape.shape(z).to_vec();
        if s.len() != 3 || s[1] != c.latent_channels || s[2] != c.latent_len || steps.len() != s[0] {
            return Err(DiffusionError::ShapeMismatch(format!("latent {s:?} with {} steps", steps.len())));
        }
        tape.mark("unet.denoise");
        let ks: Vec<f64> = steps.iter().map(|&k| k as f64).collect();
        let emb = tape.leaf(sinusoidal_embedding(&ks, c.step_embed_dim));
        let e = self.step_mlp.0.forward(tape, store, emb)?;
        let e = tape.silu(e);
        let e = self.step_mlp.1.forward(tape, store, e)?;
        let cond = tape.concat(&[e, obs_features])?;
        let cond = tape.silu(cond);

        let mut x = z;
        let mut skips = Vec::new();
        for (block, pool) in &self.down {
            x = block.forward(tape, store, x, cond)?;
            if let Some(p) = pool {
                skips.push(x);
                x = p.forward(tape, store, x)?;
            }
        }
        x = self.mid.forward(tape, store, x, cond)?;
        let mid_features = x;
        for (conv, block) in &self.up {
            x = tape.upsample(x, 2)?;
            x = conv.forward(tape, store, x)?;
            let skip = skips.pop().expect("one skip per pooled level");
            x = tape.concat(&[x, skip])?;
            x = block.forward(tape, store, x, cond)?;
        }
        x = self.final_block.forward(tape, store, x)?;
        x = tape.silu(x);
        let eps_hat = self.final_proj.forward(tape, store, x)?;
        Ok(DenoiserOutput { eps_hat, mid_features })
    }
}

/// Inputs of one training batch, already assembled.
#[derive(Debug, Clone)]
pub struct LdpBatch<F> {
    pub images: Tensor<F>,
    pub proprio: Tensor<F>,
    pub cue_target: Option<Tensor<F>>,
    pub guides: Vec<Pose>,
    /// Clean normalized latents `[N, C, L]`.
    pub z0: Tensor<F>,
    pub steps: Vec<usize>,
    pub eps: Tensor<F>,
}

/// Diffusion loss plus the weighted cue reconstruction loss. Returns `(total, diffusion, recon)`.
pub fn ldp_loss<F: Real>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    model: &LatentDenoiser,
    sched: &NoiseSchedule,
    batch: &LdpBatch<F>,
) -> Result<(Var, Var, Option<Var>)> {
    let n = batch.steps.len();
    let z_shape = batch.z0.shape().to_vec();
    let per = batch.z0.len() / n.max(1);
    let mut zk = Vec::with_capacity(batch.z0.len());
    for (b, &k) in batch.steps.iter().enumerate() {
        let (sa, sb) = sched.coefficients(k)?;
        let z = &batch.z0.data()[b * per..(b + 1) * per];
        let e = &batch.eps.data()[b * per..(b + 1) * per];
        zk.extend(z.iter().zip(e).map(|(&z, &e)| F::from_f64(sa * z.to_f64() + sb * e.to_f64())));
    }
    let zk = tape.leaf(Tensor::from_vec(&z_shape, zk)?);
    let images = tape.leaf(batch.images.clone());
    let proprio = tape.leaf(batch.proprio.clone());
    let feats = model.encode_obs(tape, store, images, proprio, Some(&batch.guides))?;
    let out = model.denoise(tape, store, zk, &batch.steps, feats)?;
    let eps = tape.leaf(batch.eps.clone());
    let diff = tape.mse(out.eps_hat, eps)?;
    let (Some(head), Some(target)) = (&model.recon, &batch.cue_target) else {
        return Ok((diff, diff, None));
    };
    let pred = head.forward(tape, store, out.mid_features)?;
    let t = tape.leaf(target.clone());
    let recon = tape.mse(pred, t)?;
    let w = tape.affine(recon, F::from_f64(model.config.recon_weight), F::zero());
    let total = tape.add(diff, w)?;
    Ok((total, diff, Some(recon)))
}

/// Hex SHA-256 of the stage marks an execution recorded.
pub fn stage_digest(trace: &[String]) -> String {
    let mut h = Sha256::new();
    for s in trace {
        h.update(s.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Per-channel affine map of latents onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentNorm {
    pub center: Vec<f64>,
    pub half_range: Vec<f64>,
}

/// Smallest half range a channel is scaled by.
const MIN_HALF_RANGE: f64 = 1e-3;

impl LatentNorm {
    pub fn identity(channels: usize) -> Self {
        LatentNorm {
            center: vec![0.0; channels],
            half_range: vec![1.0; channels],
        }
    }

    /// Range over batch and time of `z[N, C, L]`.
    pub fn fit(z: &Tensor<f32>) -> Self {
        let s = z.shape();
        let (n, c, l) = (s[0], s[1], s[2]);
        let d = z.data();
        let mut center = vec![0.0; c];
        let mut half_range = vec![1.0; c];
        for ch in 0..c {
            let vals = (0..n).flat_map(|b| (0..l).map(move |t| (b * c + ch) * l + t)).map(|i| d[i] as f64);
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if lo.is_finite() && hi.is_finite() {
                center[ch] = 0.5 * (lo + hi);
                half_range[ch] = (0.5 * (hi - lo)).max(MIN_HALF_RANGE);
            }
        }
        LatentNorm { center, half_range }
    }

    fn map<F: Real>(&self, z: &Tensor<F>, f: impl Fn(f64, f64, f64) -> f64) -> Tensor<F> {
        let s = z.shape();
        let (c, l) = (s[1], s[2]);
        let data = z
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / l) % c;
                F::from_f64(f(v.to_f64(), self.center[ch], self.half_range[ch]))
            })
            .collect();
        Tensor::from_vec(s, data).expect("same shape")
    }

    pub fn normalize<F: Real>(&self, z: &Tensor<F>) -> Tensor<F> {
        self.map(z, |v, m, s| (v - m) / s)
    }

    pub fn denormalize<F: Real>(&self, z: &Tensor<F>) -> Tensor<F> {
        self.map(z, |v, m, s| v * s + m)
    }
}

/// Provides training windows without materializing every observation.
pub trait WindowSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn observation(&self, i: usize) -> Observation;
    fn guide(&self, i: usize) -> Pose;
}

/// Stacks observations into network tensors.
pub fn observation_tensors(obs: &[&Observation], with_cue_target: bool) -> Result<(Tensor<f32>, Tensor<f32>, Option<Tensor<f32>>)> {
    let n = obs.len();
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut images = Vec::with_capacity(n * IMAGE_CHANNELS * plane);
    let mut proprio = Vec::with_capacity(n * PROPRIO_DIM);
    let mut cue = Vec::new();
    for o in obs {
        if o.images.len() != IMAGE_CHANNELS * plane {
            return Err(DiffusionError::ShapeMismatch(format!("observation of {} values", o.images.len())));
        }
        images.extend_from_slice(&o.images);
        proprio.extend_from_slice(&o.proprio);
        if with_cue_target {
            cue.extend_from_slice(&o.cue_target);
        }
    }
    let images = Tensor::from_vec(&[n, IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], images)?;
    let proprio = Tensor::from_vec(&[n, PROPRIO_DIM], proprio)?;
    let cue = if with_cue_target {
        Some(Tensor::from_vec(&[n, CUE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], cue)?)
    } else {
        None
    };
    Ok((images, proprio, cue))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LdpTrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub steps: u64,
    pub ema_power: f64,
}

impl Default for LdpTrainConfig {
    fn default() -> Self {
        LdpTrainConfig {
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 1e-6,
            warmup_steps: 100,
            steps: 2000,
            ema_power: 0.75,
        }
    }
}

impl LdpTrainConfig {
    pub fn write_manifest(&self, ck: &mut Checkpoint) {
        ck.set("dataloader.batch_size", self.batch_size);
        ck.set("optimizer.lr", self.lr);
        ck.set("optimizer.weight_decay", self.weight_decay);
        ck.set("training.lr_warmup_steps", self.warmup_steps);
        ck.set("training.max_train_steps", self.steps);
        ck.set("training.ema_power", self.ema_power);
    }

    pub fn from_manifest(ck: &Checkpoint) -> Result<Self> {
        Ok(LdpTrainConfig {
            batch_size: ck.get_parsed("dataloader.batch_size")?,
            lr: ck.get_parsed("optimizer.lr")?,
            weight_decay: ck.get_parsed("optimizer.weight_decay")?,
            warmup_steps: ck.get_parsed("training.lr_warmup_steps")?,
            steps: ck.get_parsed("training.max_train_steps")?,
            ema_power: ck.get_parsed("training.ema_power")?,
        })
    }
}

/// Denoiser with parameter values, schedule and latent normalization.
#[derive(Debug, Clone)]
pub struct LdpModel {
    pub net: LatentDenoiser,
    pub store: ParamStore<f32>,
    pub schedule: NoiseSchedule,
    pub norm: LatentNorm,
}

impl LdpModel {
    pub fn init(config: LdpConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let schedule = NoiseSchedule::squared_cosine(config.train_timesteps)?;
        let norm = LatentNorm::identity(config.latent_channels);
        let net = LatentDenoiser::new(config, &mut store, &mut rng)?;
        Ok(LdpModel {
            net,
            store,
            schedule,
            norm,
        })
    }

    pub fn config(&self) -> &LdpConfig {
        &self.net.config
    }

    /// Samples a de-normalized latent `[1, C, L]` for one observation. The
    /// initial noise comes from `seed`; the result is a pure function of
    /// `(seed, params, inputs)`.
    pub fn sample(&self, obs: &Observation, guide: Option<&Pose>, seed: u64) -> Result<Tensor<f32>> {
        let c = self.config();
        let (images, proprio, _) = observation_tensors(&[obs], false)?;
        let mut tape = Tape::new();
        let iv = tape.leaf(images);
        let pv = tape.leaf(proprio);
        let guides: Vec<Pose> = guide.copied().into_iter().collect();
        let feats = self.net.encode_obs(&mut tape, &self.store, iv, pv, Some(&guides))?;
        let feats = tape.value(feats).clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian_tensor(&[1, c.latent_channels, c.latent_len], &mut rng);
        let steps = self.schedule.inference_timesteps(c.inference_steps)?;
        let z = ddim_loop(x, &self.schedule, &steps, Some(SAMPLE_CLIP), |x, k| {
            let mut t = Tape::new();
            let xv = t.leaf(x.cast::<f32>());
            let fv = t.leaf(feats.clone());
            let out = self.net.denoise(&mut t, &self.store, xv, &[k], fv)?;
            Ok(t.value(out.eps_hat).cast())
        })?;
        Ok(self.norm.denormalize(&z.cast::<f32>()))
    }

    /// Stage marks recorded by one inference pass, in execution order.
    pub fn inference_stages(&self) -> Result<Vec<String>> {
        let obs = Observation {
            images: vec![0.0; IMAGE_CHANNELS * IMAGE_SIZE * IMAGE_SIZE],
            proprio: [0.0; PROPRIO_DIM],
            cue_target: vec![0.0; CUE_CHANNELS * IMAGE_SIZE * IMAGE_SIZE],
        };
        let (images, proprio, _) = observation_tensors(&[&obs], false)?;
        let mut tape = Tape::new();
        let iv = tape.leaf(images);
        let pv = tape.leaf(proprio);
        let guides = [Pose::identity()];
        let feats = self.net.encode_obs(&mut tape, &self.store, iv, pv, Some(&guides))?;
        let c = self.config();
        let z = tape.leaf(Tensor::zeros(&[1, c.latent_channels, c.latent_len]));
        self.net.denoise(&mut tape, &self.store, z, &[1], feats)?;
        let mut trace = tape.trace().to_vec();
        if self.net.config.use_cue {
            trace.insert(0, "obs.cue".to_string());
        }
        Ok(trace)
    }

    pub fn to_checkpoint(&self, prefix_store: &ParamStore<f32>) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set("kind", "ldp");
        self.net.config.write_manifest(&mut ck);
        let c = self.net.config.latent_channels;
        let f = |v: &[f64]| Tensor::from_f64(&[c], v).expect("one value per channel");
        ck.tensors.push(("latent.center".into(), f(&self.norm.center)));
        ck.tensors.push(("latent.half_range".into(), f(&self.norm.half_range)));
        ck.put_store("ema.", prefix_store);
        ck
    }

    /// Loads the averaged weights used for inference.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.get("kind") != Some("ldp") {
            return Err(DiffusionError::Checkpoint(CheckpointError::Corrupt("not a latent diffusion checkpoint".into())));
        }
        let config = LdpConfig::from_manifest(ck)?;
        let mut m = LdpModel::init(config, 0)?;
        ck.load_store("ema.", &mut m.store)?;
        let get = |name: &str| -> Result<Vec<f64>> {
            let t = ck.tensor(name).ok_or_else(|| CheckpointError::Missing(name.into()))?;
            Ok(t.data().iter().map(|&v| v as f64).collect())
        };
        m.norm = LatentNorm {
            center: get("latent.center")?,
            half_range: get("latent.half_range")?,
        };
        let c = m.net.config.latent_channels;
        if m.norm.center.len() != c || m.norm.half_range.len() != c {
            return Err(DiffusionError::Checkpoint(CheckpointError::Corrupt("latent normalization size".into())));
        }
        Ok(m)
    }
}

/// Optimizer, EMA and step counter around an [`LdpModel`]. Batches, steps and
/// noise for step `s` come from a generator seeded by `(seed, s)`.
#[derive(Debug, Clone)]
pub struct LdpTrainer {
    pub model: LdpModel,
    pub train: LdpTrainConfig,
    pub seed: u64,
    pub ema: Ema<f32>,
    opt: AdamW<f32>,
    lr_schedule: CosineSchedule,
    step: u64,
}

impl LdpTrainer {
    /// `latents` are the frozen encoder means for every window, `[N, C, L]`.
    pub fn new(config: LdpConfig, train: LdpTrainConfig, latents: &Tensor<f32>, seed: u64) -> Result<Self> {
        if train.batch_size == 0 || !(train.lr > 0.0) {
            return Err(DiffusionError::BadConfig("batch size and learning rate must be positive".into()));
        }
        let mut model = LdpModel::init(config, seed)?;
        model.norm = LatentNorm::fit(latents);
        let opt = AdamW::new(
            AdamWConfig {
                weight_decay: train.weight_decay,
                ..AdamWConfig::default()
            },
            &model.store,
        );
        let ema = Ema::new(
            EmaConfig {
                power: train.ema_power,
                ..EmaConfig::default()
            },
            &model.store,
        )?;
        let total = train.steps.max(1);
        let lr_schedule = CosineSchedule::new(train.lr, train.warmup_steps.min(total), total)?;
        Ok(LdpTrainer {
            model,
            train,
            seed,
            ema,
            opt,
            lr_schedule,
            step: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.train.steps
    }

    /// One optimizer step over a batch drawn from `source`; returns the loss.
    pub fn train_step(&mut self, source: &dyn WindowSource, latents: &Tensor<f32>) -> Result<f64> {
        let n = source.len();
        if n == 0 {
            return Err(DiffusionError::EmptyDataset);
        }
        let c = self.model.net.config.clone();
        let per = c.latent_channels * c.latent_len;
        if latents.len() != n * per {
            return Err(DiffusionError::ShapeMismatch(format!(
                "{} latent values for {n} windows",
                latents.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(self.seed, self.step));
        let idx: Vec<usize> = if n <= self.train.batch_size {
            (0..n).collect()
        } else {
            let mut v = sample_indices(&mut rng, n, self.train.batch_size).into_vec();
            v.sort_unstable();
            v
        };
        let b = idx.len();
        let steps: Vec<usize> = idx.iter().map(|_| rng.random_range(1..=c.train_timesteps)).collect();
        let eps = gaussian_tensor(&[b, c.latent_channels, c.latent_len], &mut rng).cast::<f32>();
        let mut z0 = Vec::with_capacity(b * per);
        for &i in &idx {
            z0.extend_from_slice(&latents.data()[i * per..(i + 1) * per]);
        }
        let z0 = self.model.norm.normalize(&Tensor::from_vec(&[b, c.latent_channels, c.latent_len], z0)?);
        let obs: Vec<Observation> = idx.iter().map(|&i| source.observation(i)).collect();
        let refs: Vec<&Observation> = obs.iter().collect();
        let (images, proprio, cue_target) = observation_tensors(&refs, c.use_recon)?;
        let batch = LdpBatch {
            images,
            proprio,
            cue_target,
            guides: idx.iter().map(|&i| source.guide(i)).collect(),
            z0,
            steps,
            eps,
        };
        let mut tape = Tape::new();
        let (total, _, _) = ldp_loss(&mut tape, &self.model.store, &self.model.net, &self.model.schedule, &batch)?;
        let loss = tape.value(total).item().to_f64();
        if !loss.is_finite() {
            return Err(DiffusionError::Net(NetError::NonFinite(format!("diffusion loss at step {}", self.step))));
        }
        let grads = tape.backward(total).param_grads(&self.model.store);
        let lr = self.lr_schedule.lr(self.step);
        self.opt.step(&mut self.model.store, &grads, lr)?;
        self.ema.update(&self.model.store);
        self.step += 1;
        Ok(loss)
    }

    pub fn run(
        &mut self,
        source: &dyn WindowSource,
        latents: &Tensor<f32>,
        mut on_step: impl FnMut(u64, f64),
    ) -> Result<()> {
        while !self.is_finished() {
            let s = self.step;
            let loss = self.train_step(source, latents)?;
            on_step(s, loss);
        }
        Ok(())
    }

    /// Inference model carrying the averaged weights.
    pub fn ema_model(&self) -> LdpModel {
        let mut m = self.model.clone();
        m.store = self.ema.shadow.clone();
        m
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint(&self.ema.shadow);
        self.train.write_manifest(&mut ck);
        ck.set("seed", self.seed);
        ck.set("step", self.step);
        ck.put_store("raw.", &self.model.store);
        ck.put_optimizer("opt.", &self.opt, &self.model.store);
        ck.put_ema("ema_state.", &self.ema);
        if let Ok(stages) = self.model.inference_stages() {
            ck.set("stage_digest", stage_digest(&stages));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let loaded = LdpModel::from_checkpoint(ck)?;
        let train = LdpTrainConfig::from_manifest(ck)?;
        let seed = ck.get_parsed("seed")?;
        let c = loaded.net.config.clone();
        let dummy = Tensor::zeros(&[1, c.latent_channels, c.latent_len]);
        let mut t = LdpTrainer::new(c, train, &dummy, seed)?;
        t.model.norm = loaded.norm;
        ck.load_store("raw.", &mut t.model.store)?;
        ck.load_optimizer("opt.", &mut t.opt, &t.model.store)?;
        ck.load_ema("ema_state.", &mut t.ema)?;
        t.step = ck.get_parsed("step")?;
        Ok(t)
    }
}
