//! End-to-end acceptance gate. Runs each criterion in order, prints one
//! PASS/FAIL line per criterion and exits nonzero if any fails.

use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use graspldp::action_vae::{ActionChunk, ActionVae, ChunkSample, VaeConfig, VaeTrainConfig, VaeTrainer, ACTION_DIM};
use graspldp::datagen::{generate_dataset, Dataset, GenConfig, Windows};
use graspldp::eval::{mean_gfe, success_rate, ResultsFile};
use graspldp::geometry::{matrix_to_rot6d, rotation_distance, se3_exp, se3_log, weighted_distance, DistanceWeights, Pose};
use graspldp::graspsense::GraspCandidate;
use graspldp::hps::{argmin_distance, grasp_nms, select_grasp, SelectorConfig};
use graspldp::latent_diffusion::{
    ddim_loop, gaussian_tensor, ldp_loss, q_sample, LatentDenoiser, LdpBatch, LdpConfig, LdpModel, LdpTrainConfig,
    LdpTrainer, NoiseSchedule, ObsEncoder, Observation, ReconHead, CUE_CHANNELS, IMAGE_CHANNELS, IMAGE_SIZE,
    PROPRIO_DIM, WindowSource,
};
use graspldp::netcore::{
    grad_check, grad_check_subset, Conv1d, Conv2d, ConvTranspose2d, GradCheckReport, GroupNorm, GruCell, LayerNorm,
    Linear, ParamStore, Tape, Tensor, Var,
};
use graspldp_cli::commands::{evaluate, ldp_checkpoint, load_policy, train_ldp, train_vae, vae_checkpoint};
use graspldp_cli::config::{RunConfig, Section};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure!(elapsed <= limit, "took {elapsed:.1?}, limit {limit:?}");
    Ok(())
}

fn random_pose(rng: &mut impl Rng, spread: f64, max_angle: f64) -> Pose {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0f64));
    let axis = if axis.norm() < 1e-3 { Vector3::z() } else { axis.normalize() };
    let t = Vector3::new(
        rng.random_range(-spread..spread),
        rng.random_range(-spread..spread),
        rng.random_range(0.3..0.3 + spread),
    );
    Pose::from_axis_angle(&axis, rng.random_range(0.0..max_angle), t)
}

fn pose_gap(a: &Pose, b: &Pose) -> f64 {
    (a.rotation() - b.rotation()).abs().max().max((a.translation() - b.translation()).abs().max())
}

fn geometry() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let p = random_pose(&mut rng, 1.0, std::f64::consts::PI - 1e-3);
        let xi = se3_log(&p).map_err(|e| e.to_string())?;
        worst = worst.max(pose_gap(&se3_exp(&xi), &p));
    }
    ensure!(worst <= 1e-9, "round trip error {worst:e}");

    let w = DistanceWeights::new(100.0, 20.0).unwrap();
    let id = Pose::identity();
    let shifted = weighted_distance(&id, &Pose::from_translation(Vector3::new(0.1, 0.0, 0.0)), &w).unwrap();
    ensure!((shifted - 1.0).abs() <= 1e-9, "0.1 m gives {shifted}");
    let turned = weighted_distance(&id, &Pose::from_axis_angle(&Vector3::z(), FRAC_PI_2, Vector3::zeros()), &w).unwrap();
    let expected = FRAC_PI_2 * 20f64.sqrt();
    ensure!((turned - expected).abs() <= 1e-9, "90 deg gives {turned}, expected {expected}");

    let w = DistanceWeights::default();
    for i in 0..1000 {
        let n = rng.random_range(1..20);
        let cands = random_candidates(&mut rng, n, 1.0, 3.0);
        let current = random_pose(&mut rng, 1.0, 3.0);
        let c = 10f64.powf(rng.random_range(-3.0..3.0));
        ensure!(
            argmin_distance(&cands, &current, &w) == argmin_distance(&cands, &current, &w.scaled(c).unwrap()),
            "argmin changed under scaling by {c} on set {i}"
        );
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("max round trip {worst:.1e}, {:.1?}", start.elapsed()))
}

fn random_candidates(rng: &mut impl Rng, n: usize, spread: f64, max_angle: f64) -> Vec<GraspCandidate> {
    (0..n)
        .map(|_| GraspCandidate {
            pose: random_pose(rng, spread, max_angle),
            score: (rng.random_range(0..20) as f64) / 20.0,
            width: 0.05,
            object: None,
        })
        .collect()
}

/// Greedy suppression from the definition over an explicit visiting order.
fn nms_oracle(cands: &[GraspCandidate], cfg: &SelectorConfig) -> Vec<GraspCandidate> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&cands[i], &cands[j]);
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.pose.to_bytes().cmp(&b.pose.to_bytes()))
            .then_with(|| a.width.partial_cmp(&b.width).unwrap())
    });
    let mut keep = vec![false; cands.len()];
    for (pos, &i) in order.iter().enumerate() {
        keep[i] = !order[..pos].iter().any(|&j| {
            keep[j]
                && (cands[i].pose.translation() - cands[j].pose.translation()).norm() <= cfg.nms_trans
                && rotation_distance(cands[i].pose.rotation(), cands[j].pose.rotation()) <= cfg.nms_rot
        });
    }
    order.into_iter().filter(|&i| keep[i]).map(|i| cands[i]).collect()
}

/// Smallest distance, then highest score, then lowest index.
fn brute_force_select(pool: &[GraspCandidate], current: &Pose, w: &DistanceWeights) -> Option<GraspCandidate> {
    let d: Vec<f64> = pool
        .iter()
        .map(|c| weighted_distance(current, &c.pose, w).unwrap_or(f64::INFINITY))
        .collect();
    let best = d.iter().copied().fold(f64::INFINITY, f64::min);
    let top = (0..pool.len())
        .filter(|&i| d[i] == best)
        .map(|i| pool[i].score)
        .fold(f64::NEG_INFINITY, f64::max);
    (0..pool.len()).find(|&i| d[i] == best && pool[i].score == top).map(|i| pool[i])
}

fn hps_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = SelectorConfig::default();
    for i in 0..1000 {
        let n = rng.random_range(1..80);
        let cands = random_candidates(&mut rng, n, 0.06, 3.0);
        let current = random_pose(&mut rng, 0.2, 3.0);
        let survivors = nms_oracle(&cands, &cfg);
        let pool = &survivors[..survivors.len().min(cfg.k)];
        let expected = brute_force_select(pool, &current, &cfg.weights);
        ensure!(select_grasp(&cands, &current, &[], &cfg).ok() == expected, "selection differs on instance {i}");
    }
    for i in 0..1000 {
        let n = rng.random_range(0..50);
        let cands = random_candidates(&mut rng, n, 0.06, 3.0);
        ensure!(grasp_nms(&cands, &cfg) == nms_oracle(&cands, &cfg), "suppression differs on instance {i}");
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("2000 instances exact, {:.1?}", start.elapsed()))
}

const GRAD_EPS: f64 = 1e-4;
const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_SEEDS: u64 = 3;

fn noise(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn against_target(tape: &mut Tape<f64>, out: Var, target: &Tensor<f64>) -> graspldp::netcore::Result<Var> {
    let t = tape.leaf(target.clone());
    tape.mse(out, t)
}

fn perturb_norm_params(store: &mut ParamStore<f64>, rng: &mut impl Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        if name.ends_with(".gamma") || name.ends_with(".beta") {
            for v in store.get_mut(id).data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
}

type Forward = Box<dyn Fn(&mut Tape<f64>, &ParamStore<f64>, Var) -> graspldp::netcore::Result<Var>>;
type Builder = Box<dyn Fn(&mut ParamStore<f64>, &mut ChaCha8Rng) -> Forward>;

fn block_error(build: &Builder, input: &[usize], output: &[usize], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let fwd = build(&mut store, &mut rng);
    perturb_norm_params(&mut store, &mut rng);
    let x = noise(input, &mut rng);
    let target = noise(output, &mut rng);
    let report = grad_check(
        &store,
        |tape, s| {
            let xv = tape.leaf(x.clone());
            let y = fwd(tape, s, xv)?;
            against_target(tape, y, &target)
        },
        GRAD_EPS,
    )
    .unwrap();
    report.max_rel_error
}

fn blocks() -> Vec<(&'static str, Builder, Vec<usize>, Vec<usize>)> {
    vec![
        (
            "linear",
            Box::new(|s: &mut ParamStore<f64>, r: &mut ChaCha8Rng| {
                let l = Linear::new(s, "l", 5, 3, r).unwrap();
                Box::new(move |t: &mut Tape<f64>, s: &ParamStore<f64>, x| l.forward(t, s, x)) as Forward
            }),
            vec![4, 5],
            vec![4, 3],
        ),
        (
            "conv1d",
            Box::new(|s: &mut ParamStore<f64>, r: &mut ChaCha8Rng| {
                let c = Conv1d::new(s, "c", 3, 4, 3, 2, r).unwrap();
                Box::new(move |t: &mut Tape<f64>, s: &ParamStore<f64>, x| c.forward(t, s, x)) as Forward
            }),
            vec![2, 3, 8],
            vec![2, 4, 4],
        ),
        (
            "conv2d",
            Box::new(|s: &mut ParamStore<f64>, r: &mut ChaCha8Rng| {
                let c = Conv2d::new(s, "c", 2, 3, 3, 2, 1, r).unwrap();
                Box::new(move |t: &mut Tape<f64>, s: &ParamStore<f64>, x| c.forward(t, s, x)) as Forward
            }),
            vec![2, 2, 6, 6],
            vec![2, 3, 3, 3],
        ),
        (
            "conv_transpose2d",
            Box::new(|s: &mut ParamStore<f64>, r: &mut ChaCha8Rng| {
                let c = ConvTranspose2d::new(s, "c", 3, 2, 4, 2, 1, r).unwrap();
                Box::new(move |t: &mut Tape<f64>, s: &ParamStore<f64>, x| c.forward(t, s, x)) as Forward
            }),
            vec![2, 3, 3, 3],
            vec![2, 2, 6, 6],
        ),
        (
            "group_norm",
            Box::new(|s: &mut ParamStore<f64>, _: &mut ChaCha8Rng| {
                let g = GroupNorm::new(s, "g", 4, 2).unwrap();
                Box::new(move |t: &mut Tape<f64>, s: &ParamStore<f64>, x| g.forward(t, s, x)) as Forward
            }),
            vec![3, 4, 5],
            vec![3, 4, 5],
        ),
        (
            "layer_norm",
            Box::new(|s: &mut ParamStore<f64>, _: &mut ChaCha8Rng| {
                let g = LayerNorm::new(s, "n", 6).unwrap();
                Box::new(move |t: &mut Tape<f64>, s: &ParamStore<f64>, x| g.forward(t, s, x)) as Forward
            }),
            vec![3, 6],
            vec![3, 6],
        ),
        (
            "film",
            Box::new(|s: &mut ParamStore<f64>, r: &mut ChaCha8Rng| {
                let c = Conv1d::new(s, "c", 2, 3, 3, 1, r).unwrap();
                let f = Linear::new(s, "f", 4, 6, r).unwrap();
                let cond = noise(&[2, 4], r);
                Box::new(move |t: &mut Tape<f64>, s: &ParamStore<f64>, x| {
                    let h = c.forward(t, s, x)?;
                    let cv = t.leaf(cond.clone());
                    let ss = f.forward(t, s, cv)?;
                    let scale = t.slice(ss, 0, 3)?;
                    let shift = t.slice(ss, 3, 3)?;
                    t.film(h, scale, shift)
                }) as Forward
            }),
            vec![2, 2, 5],
            vec![2, 3, 5],
        ),
        (
            "gru",
            Box::new(|s: &mut ParamStore<f64>, r: &mut ChaCha8Rng| {
                let cell = GruCell::new(s, "gru", 3, 4, r).unwrap();
                Box::new(move |t: &mut Tape<f64>, s: &ParamStore<f64>, x| {
                    let mut h = t.leaf(Tensor::zeros(&[2, 4]));
                    for step in 0..4 {
                        let xt = t.time_select(x, step)?;
                        h = cell.forward(t, s, xt, h)?;
                    }
                    Ok(h)
                }) as Forward
            }),
            vec![2, 3, 4],
            vec![2, 4],
        ),
    ]
}

fn subset_error<F>(store: &ParamStore<f64>, f: F, per_param: usize) -> f64
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> graspldp::netcore::Result<Var>,
{
    let report: GradCheckReport = grad_check_subset(store, f, GRAD_EPS, per_param).unwrap();
    report.max_rel_error
}

fn tiny_vae(guided: bool) -> VaeConfig {
    VaeConfig {
        horizon: 4,
        latent_channels: 2,
        conv_channels: 4,
        rnn_hidden: 4,
        kl_weight: 1e-2,
        guided,
    }
}

fn tiny_ldp(condition_guidance: bool) -> LdpConfig {
    LdpConfig {
        latent_channels: 2,
        latent_len: 4,
        down_dims: vec![4, 8],
        kernel_size: 3,
        n_groups: 2,
        step_embed_dim: 4,
        obs_feature_dim: 34,
        train_timesteps: 10,
        inference_steps: 5,
        use_cue: true,
        use_recon: true,
        recon_weight: 0.2,
        condition_guidance,
    }
}

fn random_chunk(rng: &mut impl Rng, horizon: usize) -> ChunkSample {
    let guide = random_pose(rng, 0.1, 2.0);
    let actions = (0..horizon)
        .map(|i| {
            let p = random_pose(rng, 0.1, 2.0);
            let mut a = [0.0; ACTION_DIM];
            a[..3].copy_from_slice(p.translation().as_slice());
            a[3..9].copy_from_slice(&matrix_to_rot6d(p.rotation()).unwrap().0);
            a[9] = if i + 1 < horizon { 1.0 } else { 0.0 };
            a
        })
        .collect();
    ChunkSample {
        actions: ActionChunk(actions),
        guide,
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut errors: Vec<(String, f64)> = Vec::new();
    for (name, build, input, output) in blocks() {
        let worst = (0..GRAD_SEEDS).map(|s| block_error(&build, &input, &output, s)).fold(0.0, f64::max);
        errors.push((name.to_string(), worst));
    }
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = ObsEncoder::new(&mut store, 20, &mut rng).unwrap();
        let images = noise(&[2, IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], &mut rng);
        let proprio = noise(&[2, PROPRIO_DIM], &mut rng);
        let target = noise(&[2, 20], &mut rng);
        let e = subset_error(
            &store,
            |tape, s| {
                let i = tape.leaf(images.clone());
                let p = tape.leaf(proprio.clone());
                let y = enc.forward(tape, s, i, p).unwrap();
                against_target(tape, y, &target)
            },
            6,
        );
        errors.push(("obs_encoder".into(), e));

        let mut store = ParamStore::new();
        let head = ReconHead::new(&mut store, 6, &mut rng).unwrap();
        let feats = noise(&[2, 3, 2], &mut rng);
        let target = noise(&[2, CUE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], &mut rng);
        let e = subset_error(
            &store,
            |tape, s| {
                let f = tape.leaf(feats.clone());
                let y = head.forward(tape, s, f).unwrap();
                against_target(tape, y, &target)
            },
            6,
        );
        errors.push(("recon_head".into(), e));

        for guided in [true, false] {
            let mut store = ParamStore::new();
            let cfg = tiny_vae(guided);
            let vae = ActionVae::new(cfg, &mut store, &mut rng).unwrap();
            let samples: Vec<ChunkSample> = (0..3).map(|_| random_chunk(&mut rng, cfg.horizon)).collect();
            let refs: Vec<&ChunkSample> = samples.iter().collect();
            let eps = noise(&[3, cfg.latent_channels, cfg.latent_len()], &mut rng);
            let report = grad_check(&store, |tape, s| Ok(vae.loss(tape, s, &refs, Some(eps.clone())).unwrap().0), GRAD_EPS).unwrap();
            errors.push((format!("vae_loss(guided={guided})"), report.max_rel_error));
        }

        for cg in [false, true] {
            let mut store = ParamStore::new();
            let cfg = tiny_ldp(cg);
            let net = LatentDenoiser::new(cfg.clone(), &mut store, &mut rng).unwrap();
            perturb_norm_params(&mut store, &mut rng);
            let sched = NoiseSchedule::squared_cosine(cfg.train_timesteps).unwrap();
            let n = 2;
            let batch = LdpBatch {
                images: noise(&[n, IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], &mut rng),
                proprio: noise(&[n, PROPRIO_DIM], &mut rng),
                cue_target: Some(noise(&[n, CUE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], &mut rng)),
                guides: (0..n).map(|_| random_pose(&mut rng, 0.1, 2.0)).collect(),
                z0: noise(&[n, cfg.latent_channels, cfg.latent_len], &mut rng),
                steps: (0..n).map(|_| rng.random_range(1..=cfg.train_timesteps)).collect(),
                eps: noise(&[n, cfg.latent_channels, cfg.latent_len], &mut rng),
            };
            let e = subset_error(&store, |tape, s| Ok(ldp_loss(tape, s, &net, &sched, &batch).unwrap().0), 4);
            errors.push((format!("ldp_loss(cg={cg})"), e));
        }
    }
    let (name, worst) = errors
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap_or_default();
    ensure!(worst <= GRAD_TOLERANCE, "{name}: relative error {worst:e}");
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!("worst {name} {worst:.1e}, {:.1?}", start.elapsed()))
}

fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0))
}

fn observation(seed: u64) -> Observation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut proprio = [0.0f32; PROPRIO_DIM];
    for p in &mut proprio {
        *p = rng.random_range(-1.0..1.0);
    }
    Observation {
        images: (0..IMAGE_CHANNELS * IMAGE_SIZE * IMAGE_SIZE).map(|_| rng.random_range(-1.0..1.0)).collect(),
        proprio,
        cue_target: vec![0.0; CUE_CHANNELS * IMAGE_SIZE * IMAGE_SIZE],
    }
}

fn scheduler() -> Outcome {
    let start = Instant::now();
    let s = NoiseSchedule::squared_cosine(100).unwrap();
    ensure!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]), "alpha_bar not strictly decreasing");

    let n = 10_000;
    let z0 = Tensor::full(&[n], 0.8);
    let eps = gaussian_tensor(&[n], &mut ChaCha8Rng::seed_from_u64(5));
    let mut worst: f64 = 0.0;
    for k in [1, 10, 50, 90, 100] {
        let (_, var) = moments(q_sample(&z0, k, &eps, &s).unwrap().data());
        let expected = 1.0 - s.alpha_bar(k);
        worst = worst.max((var - expected).abs() / expected);
    }
    ensure!(worst < 0.03, "forward variance off by {:.2}%", 100.0 * worst);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for steps in [1, 5, 10, 37] {
        let ts = s.inference_timesteps(steps).unwrap();
        let x = gaussian_tensor(&[2, 3, 4], &mut rng);
        let out = ddim_loop(x.clone(), &s, &ts, None, |x, _| Ok(Tensor::zeros(x.shape()))).unwrap();
        let scale = 1.0 / s.alpha_bar(ts[0]).sqrt();
        let err = out.data().iter().zip(x.data()).map(|(o, i)| (o - i * scale).abs()).fold(0.0, f64::max);
        ensure!(err <= 1e-9 * scale, "zero denoiser over {steps} steps off by {err:e}");
    }

    for seed in 0..4u64 {
        let m = LdpModel::init(tiny_ldp(false), seed).unwrap();
        let obs = observation(seed);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let a = m.sample(&obs, None, seed * 31 + 1).unwrap();
        let b = m.sample(&obs, None, seed * 31 + 1).unwrap();
        ensure!(bits(&a) == bits(&b), "sampling not bitwise repeatable for seed {seed}");
    }
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!("variance within {:.2}%, {:.1?}", 100.0 * worst, start.elapsed()))
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let data = generate_dataset(&GenConfig::new(1, 1, 3)).map_err(|e| e.to_string())?;
    ensure!(data.episodes.len() == 1, "expected one episode, got {}", data.episodes.len());
    let episode = &data.episodes[0];
    let windows = Windows::new(&data.episodes, 16, true);
    let chunks = windows.chunks();
    let refs: Vec<&ChunkSample> = chunks.iter().collect();

    let train = VaeTrainConfig {
        batch_size: 128,
        lr: 4e-3,
        weight_decay: 1e-4,
        warmup_steps: 100,
        steps: 2000,
    };
    let mut vae = VaeTrainer::new(VaeConfig::default(), train, 1).map_err(|e| e.to_string())?;
    vae.run(&chunks, |_, _| {}).map_err(|e| e.to_string())?;
    let mse = vae.model.recon_mse(&refs).map_err(|e| e.to_string())?;
    ensure!(mse < 1e-4, "reconstruction MSE {mse:e}");

    let latents = vae.model.encode_mean(&refs).map_err(|e| e.to_string())?;
    let train = LdpTrainConfig {
        batch_size: 64,
        lr: 1e-3,
        weight_decay: 1e-6,
        warmup_steps: 50,
        steps: 1000,
        ema_power: 0.75,
    };
    let mut ldp = LdpTrainer::new(LdpConfig::default(), train, &latents, 1).map_err(|e| e.to_string())?;
    ldp.run(&windows, &latents, |_, _| {}).map_err(|e| e.to_string())?;
    let model = ldp.ema_model();

    let g = episode.grasp_frame_index.ok_or("demonstration has no grasp frame")?;
    let from = g.saturating_sub(8);
    let guide = episode.target.pose;
    let z = model.sample(&windows.observation(from), Some(&guide), 5).map_err(|e| e.to_string())?;
    let chunk = &vae.model.decode(&z, Some(&[guide])).map_err(|e| e.to_string())?[0];
    let reached = chunk.pose(g - from).ok_or("decoded chunk too short")?;
    let demo = Pose::from_vec9(&episode.actions[g]).map_err(|e| e.to_string())?;
    let dt = (reached.translation() - demo.translation()).norm();
    let dr = rotation_distance(reached.rotation(), demo.rotation()).to_degrees();
    ensure!(dt <= 0.01 && dr <= 5.0, "grasp frame off by {:.2} cm / {dr:.2} deg", 100.0 * dt);
    within(start.elapsed(), Duration::from_secs(600))?;
    Ok(format!("MSE {mse:.2e}, grasp frame {:.2} cm / {dr:.2} deg, {:.1?}", 100.0 * dt, start.elapsed()))
}

/// Trained checkpoints and evaluation results shared by the directional criteria.
struct Study {
    full: ResultsFile,
    base: ResultsFile,
    cg: ResultsFile,
    random: ResultsFile,
    highest: ResultsFile,
    nearest: ResultsFile,
    replan: ResultsFile,
    once: ResultsFile,
    demos: usize,
    train_time: Duration,
    eval_time: Duration,
}

const DATA_SEED: u64 = 7;
const TRAIN_SEED: u64 = 1;
const EVAL_SEED: u64 = 1001;
const EPISODES: &str = "200";
const DYNAMIC_EPISODES: &str = "100";

fn config(section: Section, pairs: &[(&str, &str)]) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::new(section);
    for (k, v) in pairs {
        cfg.set(k, v).map_err(|e| e.to_string())?;
    }
    Ok(cfg)
}

fn run_study() -> Result<Study, String> {
    let err = |e: graspldp_cli::CliError| e.to_string();
    let mut sink = std::io::sink();
    let data: Dataset = generate_dataset(&GenConfig::new(10, 500, DATA_SEED)).map_err(|e| e.to_string())?;
    let demos = data.episodes.len();
    ensure!(demos > 0, "no demonstrations generated");
    let train_start = Instant::now();

    let mut trained = Vec::new();
    for guided in ["true", "false"] {
        let cfg = config(Section::TrainVae, &[("latent_guidance", guided)])?;
        let (trainer, _) = train_vae(&cfg, TRAIN_SEED, &data, &mut sink).map_err(err)?;
        trained.push(vae_checkpoint(&trainer, &cfg, &data));
    }
    let (guided_vae, plain_vae) = (&trained[0], &trained[1]);
    let plain_model = graspldp::action_vae::VaeModel::from_checkpoint(plain_vae).map_err(|e| e.to_string())?;
    let guided_model = graspldp::action_vae::VaeModel::from_checkpoint(guided_vae).map_err(|e| e.to_string())?;

    let variants: [(&[(&str, &str)], &_, &_); 3] = [
        (&[], guided_vae, &guided_model),
        (&[("use_cue", "false"), ("use_recon", "false")], plain_vae, &plain_model),
        (&[("condition_guidance", "true")], plain_vae, &plain_model),
    ];
    let mut policies = Vec::new();
    for (flags, vae_ck, vae_model) in variants {
        let cfg = config(Section::TrainLdp, flags)?;
        let (trainer, _) = train_ldp(&cfg, TRAIN_SEED, &data, Some(vae_model), &mut sink).map_err(err)?;
        let ldp_ck = ldp_checkpoint(&trainer, &cfg, vae_ck);
        let eval_flags: Vec<(&str, &str)> = flags.iter().copied().filter(|(k, _)| *k != "use_recon").collect();
        let eval_cfg = config(Section::Eval, &eval_flags)?;
        policies.push((load_policy(vae_ck, &ldp_ck, &eval_cfg).map_err(err)?, eval_flags));
    }
    let train_time = train_start.elapsed();
    drop(data);

    let run = |i: usize, extra: &[(&str, &str)]| -> Result<ResultsFile, String> {
        let (policy, flags) = &policies[i];
        let mut pairs = flags.clone();
        pairs.extend_from_slice(extra);
        let cfg = config(Section::Eval, &pairs)?;
        Ok(evaluate(&cfg, EVAL_SEED, 1, policy, &mut std::io::sink()).map_err(err)?.1)
    };
    let eval_start = Instant::now();
    let in_domain = [("suite", "in-domain"), ("episodes", EPISODES)];
    let full = run(0, &in_domain)?;
    let base = run(1, &in_domain)?;
    let eval_time = eval_start.elapsed();
    let cg = run(2, &in_domain)?;
    let select = |s: &'static str| {
        let mut p = in_domain.to_vec();
        p.push(("select", s));
        run(0, &p)
    };
    let (random, highest, nearest) = (select("random")?, select("highest")?, select("nearest")?);
    let dynamic = [("suite", "dynamic"), ("episodes", DYNAMIC_EPISODES)];
    let replan = run(0, &[dynamic[0], dynamic[1], ("action_horizon", "4")])?;
    let once = run(0, &[dynamic[0], dynamic[1], ("action_horizon", "8"), ("detect_once", "true")])?;
    Ok(Study {
        full,
        base,
        cg,
        random,
        highest,
        nearest,
        replan,
        once,
        demos,
        train_time,
        eval_time,
    })
}

fn sr(r: &ResultsFile) -> f64 {
    success_rate(&r.trials).unwrap_or(f64::NAN)
}

fn gfe(r: &ResultsFile) -> Result<f64, String> {
    mean_gfe(&r.trials).ok_or_else(|| "no trial closed the gripper".to_string())
}

fn ordering(study: &Study) -> Outcome {
    let (full, base) = (sr(&study.full), sr(&study.base));
    ensure!(full >= base + 10.0, "full {full:.1}% vs baseline {base:.1}%");
    within(study.train_time, Duration::from_secs(30 * 60))?;
    within(study.eval_time, Duration::from_secs(5 * 60))?;
    Ok(format!(
        "full {full:.1}% vs baseline {base:.1}% on {} demos, train {:.0?}, eval {:.0?}",
        study.demos, study.train_time, study.eval_time
    ))
}

fn frame_error(study: &Study) -> Outcome {
    let (full, cg) = (gfe(&study.full)?, gfe(&study.cg)?);
    ensure!(full < cg, "latent guidance {full:.3} vs condition guidance {cg:.3}");
    Ok(format!("mean GFE {full:.3} vs condition guidance {cg:.3}"))
}

fn selection(study: &Study) -> Outcome {
    let hps = sr(&study.full);
    let others = [("random", &study.random), ("highest", &study.highest), ("nearest", &study.nearest)];
    let summary: Vec<String> = others.iter().map(|(n, r)| format!("{n} {:.1}%", sr(r))).collect();
    for (name, r) in others {
        ensure!(hps >= sr(r), "hps {hps:.1}% below {name} {:.1}%", sr(r));
    }
    Ok(format!("hps {hps:.1}% vs {}", summary.join(", ")))
}

fn dynamic(study: &Study) -> Outcome {
    let (replan, once) = (sr(&study.replan), sr(&study.once));
    ensure!(replan > once, "re-detect h4 {replan:.1}% vs detect-once h8 {once:.1}%");
    Ok(format!("re-detect h4 {replan:.1}% vs detect-once h8 {once:.1}%"))
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let name = path.strip_prefix(root).unwrap().display().to_string();
                out.push((name, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn pipeline_once(root: &Path) -> Result<(), String> {
    let p = |n: &str| root.join(n).display().to_string();
    let (data, vae, ldp) = (p("data"), p("vae.ckpt"), p("ldp.ckpt"));
    let runs: Vec<Vec<String>> = [
        vec!["gen-data", "--objects", "2", "--episodes", "3", "--seed", "5", "--out", &data],
        vec![
            "train-vae", "--data", &data, "--out", &vae, "--seed", "2",
            "--set", "training.max_train_steps=20", "--set", "dataloader.batch_size=16",
            "--set", "conv_latent_dims=8", "--set", "rnn_latent_dims=8", "--set", "training.lr_warmup_steps=2",
        ],
        vec![
            "train-ldp", "--data", &data, "--vae", &vae, "--out", &ldp, "--seed", "3",
            "--set", "training.max_train_steps=10", "--set", "dataloader.batch_size=8",
            "--set", "unet.down_dims=[8,16]", "--set", "unet.n_groups=4",
            "--set", "unet.diffusion_step_embed_dim=8", "--set", "obs_feature_dim=16",
            "--set", "training.lr_warmup_steps=2",
        ],
        vec!["eval", "--vae", &vae, "--ldp", &ldp, "--episodes", "3", "--seed", "9", "--out", &p("in-domain.txt")],
        vec![
            "eval", "--vae", &vae, "--ldp", &ldp, "--suite", "dynamic", "--episodes", "2", "--seed", "9",
            "--out", &p("dynamic.txt"),
        ],
    ]
    .into_iter()
    .map(|args| std::iter::once("graspldp").chain(args).map(String::from).collect())
    .collect();
    for args in runs {
        let mut log = Vec::new();
        let code = graspldp_cli::run_with(args.iter().chain(&["--threads".to_string(), "1".to_string()]), &mut log);
        ensure!(code == 0, "{} exited {code}: {}", args[1], String::from_utf8_lossy(&log));
    }
    Ok(())
}

fn reproducibility() -> Outcome {
    let start = Instant::now();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        pipeline_once(d.path())?;
    }
    let (a, b) = (tree_bytes(dirs[0].path()), tree_bytes(dirs[1].path()));
    ensure!(a.len() == b.len(), "file sets differ: {} vs {}", a.len(), b.len());
    for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
        ensure!(na == nb, "file sets differ at {na} / {nb}");
        ensure!(ba == bb, "{na} differs between reruns");
    }
    Ok(format!("{} files byte-identical, {:.1?}", a.len(), start.elapsed()))
}

fn report(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} {n:>2} {name}: {detail} [{:.1?}]", start.elapsed());
    outcome.is_ok()
}

fn main() {
    let mut ok = true;
    ok &= report(1, "geometry", geometry);
    ok &= report(2, "grasp selection oracle", hps_oracle);
    ok &= report(3, "finite-difference gradients", gradients);
    ok &= report(4, "noise schedule and sampler", scheduler);
    ok &= report(5, "single-episode overfit", overfit);

    let study = catch_unwind(run_study).unwrap_or_else(|_| Err("training panicked".into()));
    let directional: [(usize, &str, fn(&Study) -> Outcome); 4] = [
        (6, "full policy beats plain latent diffusion", ordering),
        (7, "latent guidance lowers grasp frame error", frame_error),
        (8, "hps selection beats alternatives", selection),
        (9, "re-detection helps on moving targets", dynamic),
    ];
    for (n, name, check) in directional {
        ok &= report(n, name, || study.as_ref().map_err(Clone::clone).and_then(check));
    }

    ok &= report(10, "byte-identical reruns", reproducibility);
    if !ok {
        std::process::exit(1);
    }
}
