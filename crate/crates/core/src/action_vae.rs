//! Action chunk autoencoder. A strided 1-D conv encoder compresses a chunk of
//! end-effector actions into a short temporal latent; a GRU decoder unrolls
//! it back, optionally conditioned on a target grasp pose.
//!
//! With grasp guidance the encoder sees the chunk expressed in the grasp
//! frame and the decoder output is mapped back to the world frame through
//! the grasp pose, so the latent only has to describe motion relative to the
//! grasp.

use nalgebra::Matrix3;
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::geometry::Pose;
use crate::netcore::{
    step_seed, AdamW, AdamWConfig, Checkpoint, CheckpointError, Conv1d, CosineSchedule, GruCell, Linear, NetError,
    ParamStore, Real, Tape, Tensor, Var,
};

pub const ACTION_DIM: usize = 10;
pub const POSE_DIM: usize = 9;
/// Translations are multiplied by this inside the networks so they share a
/// range with the rotation columns.
pub const TRANSLATION_SCALE: f64 = 10.0;
const LOGVAR_LIMIT: f64 = 20.0;
const KERNEL: usize = 5;

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("dataset has no training samples")]
    EmptyDataset,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, VaeError>;

/// `T` actions of translation, 6D rotation and gripper opening.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk(pub Vec<[f64; ACTION_DIM]>);

impl ActionChunk {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn pose(&self, i: usize) -> Option<Pose> {
        Pose::from_vec9(&self.0[i][..POSE_DIM]).ok()
    }
}

/// Translation and 6D rotation of the grasp the decoder is steered towards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspCondition(pub [f64; POSE_DIM]);

impl GraspCondition {
    pub fn from_pose(p: &Pose) -> Self {
        GraspCondition(p.to_vec9())
    }

    /// Network-scale features.
    pub fn scaled(&self) -> [f64; POSE_DIM] {
        let mut g = self.0;
        g[..3].iter_mut().for_each(|v| *v *= TRANSLATION_SCALE);
        g
    }
}

/// A chunk paired with the grasp its demonstration was steering to.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkSample {
    pub actions: ActionChunk,
    pub guide: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeConfig {
    pub horizon: usize,
    pub latent_channels: usize,
    pub conv_channels: usize,
    pub rnn_hidden: usize,
    pub kl_weight: f64,
    /// Decoder conditioned on the grasp pose and composed in its frame.
    pub guided: bool,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            horizon: 16,
            latent_channels: 16,
            conv_channels: 64,
            rnn_hidden: 64,
            kl_weight: 1e-6,
            guided: true,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 || self.horizon % 2 != 0 {
            return Err(VaeError::BadConfig(format!("horizon {} must be even and ≥ 2", self.horizon)));
        }
        if self.latent_channels == 0 || self.conv_channels == 0 || self.rnn_hidden == 0 {
            return Err(VaeError::BadConfig("layer widths must be positive".into()));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(VaeError::BadConfig("kl_multiplier must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn latent_len(&self) -> usize {
        self.horizon / 2
    }

    pub fn write_manifest(&self, ck: &mut Checkpoint) {
        ck.set("horizon", self.horizon);
        ck.set("n_latent_dims", self.latent_channels);
        ck.set("conv_latent_dims", self.conv_channels);
        ck.set("rnn_latent_dims", self.rnn_hidden);
        ck.set("kl_multiplier", self.kl_weight);
        ck.set("latent_guidance", self.guided);
    }

    pub fn from_manifest(ck: &Checkpoint) -> Result<Self> {
        let c = VaeConfig {
            horizon: ck.get_parsed("horizon")?,
            latent_channels: ck.get_parsed("n_latent_dims")?,
            conv_channels: ck.get_parsed("conv_latent_dims")?,
            rnn_hidden: ck.get_parsed("rnn_latent_dims")?,
            kl_weight: ck.get_parsed("kl_multiplier")?,
            guided: ck.get_parsed("latent_guidance")?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Layer handles; parameters live in a [`ParamStore`].
#[derive(Debug, Clone, Copy)]
pub struct ActionVae {
    pub config: VaeConfig,
    enc_in: Conv1d,
    enc_out: Conv1d,
    gru: GruCell,
    head: Linear,
}

fn rotation_rows<F: Real>(r: &Matrix3<f64>) -> [F; 9] {
    let mut out = [F::zero(); 9];
    for i in 0..3 {
        for j in 0..3 {
            out[3 * i + j] = F::from_f64(r[(i, j)]);
        }
    }
    out
}

/// Expresses a world-frame action in `frame`: `frame⁻¹ · pose`, gripper untouched.
pub fn action_in_frame(a: &[f64; ACTION_DIM], frame: &Pose) -> [f64; ACTION_DIM] {
    let rt = frame.rotation().transpose();
    let t = frame.translation();
    let mut out = *a;
    let d = rt * nalgebra::Vector3::new(a[0] - t.x, a[1] - t.y, a[2] - t.z);
    out[..3].copy_from_slice(d.as_slice());
    for o in [3, 6] {
        let c = rt * nalgebra::Vector3::new(a[o], a[o + 1], a[o + 2]);
        out[o..o + 3].copy_from_slice(c.as_slice());
    }
    out
}

/// `[N, 10, T]` network-scale tensor of chunks, optionally in their guide frames.
pub fn chunk_tensor<F: Real>(samples: &[&ChunkSample], horizon: usize, relative: bool) -> Result<Tensor<F>> {
    let n = samples.len();
    let mut data = vec![F::zero(); n * ACTION_DIM * horizon];
    for (b, s) in samples.iter().enumerate() {
        if s.actions.len() != horizon {
            return Err(VaeError::ShapeMismatch(format!(
                "chunk of {} steps, horizon {horizon}",
                s.actions.len()
            )));
        }
        for (t, a) in s.actions.0.iter().enumerate() {
            let a = if relative { action_in_frame(a, &s.guide) } else { *a };
            for (c, &v) in a.iter().enumerate() {
                let v = if c < 3 { v * TRANSLATION_SCALE } else { v };
                data[(b * ACTION_DIM + c) * horizon + t] = F::from_f64(v);
            }
        }
    }
    Ok(Tensor::from_vec(&[n, ACTION_DIM, horizon], data)?)
}

/// Inverse of [`chunk_tensor`] for world-frame output, one chunk per batch row.
pub fn tensor_to_chunks<F: Real>(t: &Tensor<F>) -> Vec<ActionChunk> {
    let s = t.shape();
    let (n, c, l) = (s[0], s[1], s[2]);
    let d = t.data();
    (0..n)
        .map(|b| {
            ActionChunk(
                (0..l)
                    .map(|i| {
                        let mut a = [0.0; ACTION_DIM];
                        for (ch, v) in a.iter_mut().enumerate().take(c) {
                            let x = d[(b * c + ch) * l + i].to_f64();
                            *v = if ch < 3 { x / TRANSLATION_SCALE } else { x };
                        }
                        a
                    })
                    .collect(),
            )
        })
        .collect()
}

impl ActionVae {
    pub fn new<F: Real>(config: VaeConfig, store: &mut ParamStore<F>, rng: &mut impl rand::Rng) -> Result<Self> {
        config.validate()?;
        let enc_in = Conv1d::new(store, "vae.enc.in", ACTION_DIM, config.conv_channels, KERNEL, 2, rng)?;
        let enc_out = Conv1d::new(
            store,
            "vae.enc.out",
            config.conv_channels,
            2 * config.latent_channels,
            KERNEL,
            1,
            rng,
        )?;
        let cond = if config.guided { POSE_DIM } else { 0 };
        let gru = GruCell::new(store, "vae.dec.gru", config.latent_channels + cond, config.rnn_hidden, rng)?;
        let head = Linear::new(store, "vae.dec.head", config.rnn_hidden, ACTION_DIM, rng)?;
        Ok(ActionVae {
            config,
            enc_in,
            enc_out,
            gru,
            head,
        })
    }

    /// `x[N, 10, T]` → `(mu, logvar)`, each `[N, C, T/2]`.
    pub fn encode<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<(Var, Var)> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[1] != ACTION_DIM || s[2] != self.config.horizon {
            return Err(VaeError::ShapeMismatch(format!("encoder input {s:?}")));
        }
        tape.mark("vae.encode");
        let h = self.enc_in.forward(tape, store, x)?;
        let h = tape.silu(h);
        let stats = self.enc_out.forward(tape, store, h)?;
        let c = self.config.latent_channels;
        let mu = tape.slice(stats, 0, c)?;
        let lv = tape.slice(stats, c, c)?;
        let lv = tape.clamp(lv, F::from_f64(-LOGVAR_LIMIT), F::from_f64(LOGVAR_LIMIT));
        Ok((mu, lv))
    }

    /// `mu + exp(logvar / 2) · eps`.
    pub fn reparameterize<F: Real>(&self, tape: &mut Tape<F>, mu: Var, logvar: Var, eps: Tensor<F>) -> Result<Var> {
        let half = tape.affine(logvar, F::from_f64(0.5), F::zero());
        let std = tape.exp(half);
        let e = tape.leaf(eps);
        let noise = tape.mul(std, e)?;
        Ok(tape.add(mu, noise)?)
    }

    /// `z[N, C, T/2]` → world-frame network-scale chunk `[N, 10, T]`.
    /// `guides` must hold one pose per row when the model is guided.
    pub fn decode<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        z: Var,
        guides: Option<&[Pose]>,
    ) -> Result<Var> {
        let s = tape.shape(z).to_vec();
        let cfg = &self.config;
        if s.len() != 3 || s[1] != cfg.latent_channels || s[2] != cfg.latent_len() {
            return Err(VaeError::ShapeMismatch(format!("latent {s:?}")));
        }
        let n = s[0];
        let guides = match (cfg.guided, guides) {
            (true, Some(g)) if g.len() == n => Some(g),
            (true, _) => return Err(VaeError::ShapeMismatch("guided decoder needs one grasp per row".into())),
            (false, _) => None,
        };
        tape.mark("vae.decode");
        let up = tape.upsample(z, 2)?;
        let mut cond = None;
        let mut rots = Vec::new();
        let mut offset = None;
        if let Some(g) = guides {
            let mut feats = Vec::with_capacity(n * POSE_DIM);
            let mut shift = vec![F::zero(); n * POSE_DIM];
            for (b, p) in g.iter().enumerate() {
                feats.extend(GraspCondition::from_pose(p).scaled().iter().map(|&v| F::from_f64(v)));
                for i in 0..3 {
                    shift[b * POSE_DIM + i] = F::from_f64(p.translation()[i] * TRANSLATION_SCALE);
                }
                rots.push(rotation_rows::<F>(p.rotation()));
            }
            cond = Some(tape.leaf(Tensor::from_vec(&[n, POSE_DIM], feats)?));
            offset = Some(tape.leaf(Tensor::from_vec(&[n, POSE_DIM], shift)?));
        }
        let mut h = tape.leaf(Tensor::zeros(&[n, cfg.rnn_hidden]));
        let mut steps = Vec::with_capacity(cfg.horizon);
        for t in 0..cfg.horizon {
            let frame = tape.time_select(up, t)?;
            let input = match cond {
                Some(c) => tape.concat(&[frame, c])?,
                None => frame,
            };
            h = self.gru.forward(tape, store, input, h)?;
            let y = self.head.forward(tape, store, h)?;
            let mut pose = tape.slice(y, 0, POSE_DIM)?;
            if let Some(off) = offset {
                pose = tape.block_rotate(pose, rots.clone(), vec![0, 3, 6])?;
                pose = tape.add(pose, off)?;
            }
            let grip = tape.slice(y, POSE_DIM, 1)?;
            let grip = tape.sigmoid(grip);
            steps.push(tape.concat(&[pose, grip])?);
        }
        Ok(tape.time_stack(&steps)?)
    }

    /// Reconstruction MSE plus the weighted KL term. Returns `(total, mse, kl)`.
    pub fn loss<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        samples: &[&ChunkSample],
        eps: Option<Tensor<F>>,
    ) -> Result<(Var, Var, Var)> {
        let cfg = self.config;
        let input = tape.leaf(chunk_tensor(samples, cfg.horizon, cfg.guided)?);
        let target = if cfg.guided {
            tape.leaf(chunk_tensor(samples, cfg.horizon, false)?)
        } else {
            input
        };
        let (mu, lv) = self.encode(tape, store, input)?;
        let z = match eps {
            Some(e) => self.reparameterize(tape, mu, lv, e)?,
            None => mu,
        };
        let guides: Vec<Pose> = samples.iter().map(|s| s.guide).collect();
        let out = self.decode(tape, store, z, Some(&guides))?;
        let (total, mse, kl) = vae_loss(tape, out, target, mu, lv, cfg.kl_weight)?;
        Ok((total, mse, kl))
    }
}

/// `MSE(a, â) + λ·KL(N(mu, e^{logvar}) ‖ N(0, I))`, KL summed per sample and
/// averaged over the batch.
pub fn vae_loss<F: Real>(
    tape: &mut Tape<F>,
    a_hat: Var,
    a: Var,
    mu: Var,
    logvar: Var,
    kl_weight: f64,
) -> Result<(Var, Var, Var)> {
    let mse = tape.mse(a_hat, a)?;
    let kl = tape.kl_normal(mu, logvar)?;
    let weighted = tape.affine(kl, F::from_f64(kl_weight), F::zero());
    let total = tape.add(mse, weighted)?;
    Ok((total, mse, kl))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeTrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub steps: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            batch_size: 128,
            lr: 1e-3,
            weight_decay: 1e-4,
            warmup_steps: 100,
            steps: 2000,
        }
    }
}

impl VaeTrainConfig {
    pub fn write_manifest(&self, ck: &mut Checkpoint) {
        ck.set("dataloader.batch_size", self.batch_size);
        ck.set("optimizer.lr", self.lr);
        ck.set("optimizer.weight_decay", self.weight_decay);
        ck.set("training.lr_warmup_steps", self.warmup_steps);
        ck.set("training.max_train_steps", self.steps);
    }

    pub fn from_manifest(ck: &Checkpoint) -> Result<Self> {
        Ok(VaeTrainConfig {
            batch_size: ck.get_parsed("dataloader.batch_size")?,
            lr: ck.get_parsed("optimizer.lr")?,
            weight_decay: ck.get_parsed("optimizer.weight_decay")?,
            warmup_steps: ck.get_parsed("training.lr_warmup_steps")?,
            steps: ck.get_parsed("training.max_train_steps")?,
        })
    }
}

/// A trained (or training) model: layer handles plus parameter values.
#[derive(Debug, Clone)]
pub struct VaeModel {
    pub vae: ActionVae,
    pub store: ParamStore<f32>,
}

impl VaeModel {
    pub fn init(config: VaeConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vae = ActionVae::new(config, &mut store, &mut rng)?;
        Ok(VaeModel { vae, store })
    }

    /// Posterior means `[N, C, T/2]` (evaluation mode: no sampling).
    pub fn encode_mean(&self, samples: &[&ChunkSample]) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let cfg = self.vae.config;
        let x = tape.leaf(chunk_tensor(samples, cfg.horizon, cfg.guided)?);
        let (mu, _) = self.vae.encode(&mut tape, &self.store, x)?;
        Ok(tape.value(mu).clone())
    }

    /// Posterior means of every sample, encoded `batch` at a time.
    pub fn encode_all(&self, samples: &[ChunkSample], batch: usize) -> Result<Tensor<f32>> {
        if samples.is_empty() {
            return Err(VaeError::EmptyDataset);
        }
        let cfg = self.vae.config;
        let mut data = Vec::with_capacity(samples.len() * cfg.latent_channels * cfg.latent_len());
        for part in samples.chunks(batch.max(1)) {
            let refs: Vec<&ChunkSample> = part.iter().collect();
            data.extend_from_slice(self.encode_mean(&refs)?.data());
        }
        Ok(Tensor::from_vec(&[samples.len(), cfg.latent_channels, cfg.latent_len()], data)?)
    }

    /// Decodes latents `[N, C, T/2]` into world-frame chunks.
    pub fn decode(&self, z: &Tensor<f32>, guides: Option<&[Pose]>) -> Result<Vec<ActionChunk>> {
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let out = self.vae.decode(&mut tape, &self.store, zv, guides)?;
        Ok(tensor_to_chunks(tape.value(out)))
    }

    /// Reconstruction MSE at network scale with `z = mu`.
    pub fn recon_mse(&self, samples: &[&ChunkSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(VaeError::EmptyDataset);
        }
        let mut tape = Tape::new();
        let (_, mse, _) = self.vae.loss(&mut tape, &self.store, samples, None)?;
        Ok(tape.value(mse).item().to_f64())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set("kind", "vae");
        self.vae.config.write_manifest(&mut ck);
        ck.put_store("", &self.store);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.get("kind") != Some("vae") {
            return Err(VaeError::Checkpoint(CheckpointError::Corrupt("not an action autoencoder".into())));
        }
        let config = VaeConfig::from_manifest(ck)?;
        let mut model = VaeModel::init(config, 0)?;
        ck.load_store("", &mut model.store)?;
        Ok(model)
    }
}

/// Optimizer state and step counter around a [`VaeModel`]. Each step draws
/// its batch and noise from a generator seeded by `(seed, step)`, so a
/// restored trainer continues exactly as an uninterrupted one would.
#[derive(Debug, Clone)]
pub struct VaeTrainer {
    pub model: VaeModel,
    pub train: VaeTrainConfig,
    pub seed: u64,
    opt: AdamW<f32>,
    schedule: CosineSchedule,
    step: u64,
}

impl VaeTrainer {
    pub fn new(config: VaeConfig, train: VaeTrainConfig, seed: u64) -> Result<Self> {
        if train.batch_size == 0 || !(train.lr > 0.0) {
            return Err(VaeError::BadConfig("batch size and learning rate must be positive".into()));
        }
        let model = VaeModel::init(config, seed)?;
        let opt = AdamW::new(
            AdamWConfig {
                weight_decay: train.weight_decay,
                ..AdamWConfig::default()
            },
            &model.store,
        );
        let total = train.steps.max(1);
        let schedule = CosineSchedule::new(train.lr, train.warmup_steps.min(total), total)?;
        Ok(VaeTrainer {
            model,
            train,
            seed,
            opt,
            schedule,
            step: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.train.steps
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn train_step(&mut self, samples: &[ChunkSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(VaeError::EmptyDataset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(self.seed, self.step));
        let batch: Vec<&ChunkSample> = if samples.len() <= self.train.batch_size {
            samples.iter().collect()
        } else {
            let mut idx = sample_indices(&mut rng, samples.len(), self.train.batch_size).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| &samples[i]).collect()
        };
        let cfg = self.model.vae.config;
        let shape = [batch.len(), cfg.latent_channels, cfg.latent_len()];
        let eps: Vec<f32> = (0..shape.iter().product::<usize>())
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            })
            .collect();
        let mut tape = Tape::new();
        let (total, _, _) = self
            .model
            .vae
            .loss(&mut tape, &self.model.store, &batch, Some(Tensor::from_vec(&shape, eps)?))?;
        let loss = tape.value(total).item().to_f64();
        if !loss.is_finite() {
            return Err(VaeError::Net(NetError::NonFinite(format!("autoencoder loss at step {}", self.step))));
        }
        let grads = tape.backward(total).param_grads(&self.model.store);
        let lr = self.schedule.lr(self.step);
        self.opt.step(&mut self.model.store, &grads, lr)?;
        self.step += 1;
        Ok(loss)
    }

    /// Runs until the configured step count, reporting `(step, loss)`.
    pub fn run(&mut self, samples: &[ChunkSample], mut on_step: impl FnMut(u64, f64)) -> Result<()> {
        while !self.is_finished() {
            let s = self.step;
            let loss = self.train_step(samples)?;
            on_step(s, loss);
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        self.train.write_manifest(&mut ck);
        ck.set("seed", self.seed);
        ck.set("step", self.step);
        ck.put_optimizer("opt.", &self.opt, &self.model.store);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = VaeModel::from_checkpoint(ck)?;
        let train = VaeTrainConfig::from_manifest(ck)?;
        let seed = ck.get_parsed("seed")?;
        let mut t = VaeTrainer::new(model.vae.config, train, seed)?;
        t.model = model;
        ck.load_optimizer("opt.", &mut t.opt, &t.model.store)?;
        t.step = ck.get_parsed("step")?;
        Ok(t)
    }
}

/// Trains from scratch for `train.steps` steps.
pub fn train_vae(
    samples: &[ChunkSample],
    config: VaeConfig,
    train: VaeTrainConfig,
    seed: u64,
    on_step: impl FnMut(u64, f64),
) -> Result<VaeTrainer> {
    if samples.is_empty() {
        return Err(VaeError::EmptyDataset);
    }
    let mut t = VaeTrainer::new(config, train, seed)?;
    t.run(samples, on_step)?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn tiny(guided: bool) -> VaeConfig {
        VaeConfig {
            horizon: 4,
            latent_channels: 2,
            conv_channels: 3,
            rnn_hidden: 4,
            kl_weight: 1e-3,
            guided,
        }
    }

    fn sample(h: usize, shift: f64) -> ChunkSample {
        let g = Pose::from_axis_angle(&Vector3::x(), 3.0, Vector3::new(0.05, -0.02, 0.04));
        let actions = (0..h)
            .map(|i| {
                let p = Pose::from_axis_angle(&Vector3::x(), 3.0 - 0.01 * i as f64, Vector3::new(0.0, shift, 0.2 - 0.01 * i as f64));
                let v = p.to_vec9();
                let mut a = [0.0; ACTION_DIM];
                a[..9].copy_from_slice(&v);
                a[9] = if i + 1 < h { 1.0 } else { 0.0 };
                a
            })
            .collect();
        ChunkSample {
            actions: ActionChunk(actions),
            guide: g,
        }
    }

    #[test]
    fn shapes_and_gripper_range() {
        let m = VaeModel::init(VaeConfig::default(), 3).unwrap();
        let s = sample(16, 0.0);
        let mu = m.encode_mean(&[&s]).unwrap();
        assert_eq!(mu.shape(), &[1, 16, 8]);
        assert!(mu.all_finite());
        let out = m.decode(&mu, Some(&[s.guide])).unwrap();
        assert_eq!(out[0].len(), 16);
        assert!(out[0].0.iter().all(|a| (0.0..=1.0).contains(&a[9])));
        assert_eq!(m.decode(&mu, Some(&[s.guide])).unwrap(), out);
        assert!(m.decode(&mu, None).is_err());
    }

    #[test]
    fn frame_change_round_trips() {
        let s = sample(4, 0.01);
        let rel = action_in_frame(&s.actions.0[2], &s.guide);
        let back = action_in_frame(&rel, &s.guide.inverse());
        for (a, b) in back.iter().zip(&s.actions.0[2]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_reconstruction_with_standard_posterior_costs_nothing() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::full(&[2, 10, 4], 0.3));
        let z = tape.leaf(Tensor::zeros(&[2, 2, 2]));
        let (total, _, _) = vae_loss(&mut tape, a, a, z, z, 1e-6).unwrap();
        assert_eq!(tape.value(total).item(), 0.0);
    }

    #[test]
    fn kl_closed_form_for_unit_mean() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[3, 10, 4]));
        let mu = tape.leaf(Tensor::full(&[3, 2, 2], 1.0));
        let lv = tape.leaf(Tensor::zeros(&[3, 2, 2]));
        let (total, _, kl) = vae_loss(&mut tape, a, a, mu, lv, 1e-6).unwrap();
        assert!((tape.value(kl).item() - 0.5 * 4.0).abs() < 1e-12);
        assert!((tape.value(total).item() - 1e-6 * 2.0).abs() < 1e-18);
    }

    #[test]
    fn loss_ignores_batch_order() {
        let m = VaeModel::init(tiny(true), 1).unwrap();
        let (a, b, c) = (sample(4, 0.0), sample(4, 0.02), sample(4, -0.03));
        let mse1 = m.recon_mse(&[&a, &b, &c]).unwrap();
        let mse2 = m.recon_mse(&[&c, &a, &b]).unwrap();
        assert!((mse1 - mse2).abs() < 1e-6);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let m = VaeModel::init(tiny(false), 1).unwrap();
        let s = sample(5, 0.0);
        assert!(matches!(m.encode_mean(&[&s]), Err(VaeError::ShapeMismatch(_))));
        assert!(VaeConfig { horizon: 3, ..tiny(true) }.validate().is_err());
        assert!(matches!(m.recon_mse(&[]), Err(VaeError::EmptyDataset)));
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let data: Vec<ChunkSample> = (0..5).map(|i| sample(4, 0.01 * i as f64)).collect();
        let train = VaeTrainConfig {
            batch_size: 3,
            lr: 1e-2,
            weight_decay: 1e-4,
            warmup_steps: 2,
            steps: 8,
        };
        let full = train_vae(&data, tiny(true), train, 11, |_, _| {}).unwrap();
        let mut half = VaeTrainer::new(tiny(true), train, 11).unwrap();
        for _ in 0..4 {
            half.train_step(&data).unwrap();
        }
        let bytes = crate::netcore::encode_checkpoint(&half.to_checkpoint());
        let mut resumed = VaeTrainer::from_checkpoint(&crate::netcore::decode_checkpoint(&bytes).unwrap()).unwrap();
        resumed.run(&data, |_, _| {}).unwrap();
        for ((_, a), (_, b)) in full.model.store.iter().zip(resumed.model.store.iter()) {
            assert_eq!(a.data(), b.data());
        }
    }
}
