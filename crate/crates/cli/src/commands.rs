//! Command implementations. Each takes a resolved [`RunConfig`] so callers
//! other than the argument parser can drive the same code paths.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use graspldp::action_vae::{VaeConfig, VaeModel, VaeTrainConfig, VaeTrainer};
use graspldp::datagen::{generate_dataset, read_dataset, write_dataset, Dataset, GenConfig, Windows};
use graspldp::eval::{
    format_results, parse_results, pipeline_digest, report_table, run_cluttered_suite, run_suite, EvalConfig,
    EvalError, LatentPolicy, ResultsFile,
};
use graspldp::geometry::DistanceWeights;
use graspldp::hps::{SelectorConfig, Strategy};
use graspldp::latent_diffusion::{DiffusionError, LdpConfig, LdpModel, LdpTrainConfig, LdpTrainer, WindowSource};
use graspldp::netcore::{read_checkpoint, write_checkpoint, Checkpoint};
use graspldp::simworld::{Suite, TRAIN_OBJECTS};

use crate::config::{parse_dims, RunConfig, Section};
use crate::{Cli, CliError, Command, ConfigArgs};

type Result<T> = std::result::Result<T, CliError>;

const ENCODE_BATCH: usize = 256;
const LOG_EVERY: u64 = 100;

/// Defaults, then the config file, then `--set` overrides, then `extra`.
pub fn resolve(section: Section, args: &ConfigArgs, extra: &[(&str, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::new(section);
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    cfg.apply_overrides(&args.overrides)?;
    for (k, v) in extra {
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn announce(out: &mut dyn Write, cfg: &RunConfig, seed: u64) -> Result<()> {
    for (k, v) in cfg.entries() {
        writeln!(out, "  {k} = {v}")?;
    }
    writeln!(out, "seed={seed}")?;
    writeln!(out, "config_hash={}", cfg.hash())?;
    Ok(())
}

/// Records the resolved config and its hash in a checkpoint manifest.
pub fn stamp(ck: &mut Checkpoint, cfg: &RunConfig) {
    ck.set("config.command", cfg.section.name());
    for (k, v) in cfg.entries() {
        ck.set(&format!("config.{k}"), v);
    }
    ck.set("config_hash", cfg.hash());
}

/// Hash recomputed from the config entries stored in a checkpoint.
pub fn stamped_hash(ck: &Checkpoint) -> Result<String> {
    let command = ck
        .get("config.command")
        .ok_or_else(|| CliError::Data("checkpoint carries no run config".into()))?;
    let mut text = format!("command={command}\n");
    for (k, v) in &ck.manifest {
        if let Some(name) = k.strip_prefix("config.") {
            if name != "command" {
                let _ = writeln!(text, "{name}={v}");
            }
        }
    }
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

/// Reads a checkpoint and checks that its stored config hash still matches.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ck = read_checkpoint(path)?;
    let stored = ck
        .get("config_hash")
        .ok_or_else(|| CliError::Data(format!("{} has no config hash", path.display())))?;
    if stamped_hash(&ck)? != stored {
        return Err(CliError::Data(format!("{} config hash does not match its contents", path.display())));
    }
    Ok(ck)
}

fn loss_log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".loss.txt");
    PathBuf::from(s)
}

/// Steps implied by the config: `training.num_epochs` passes over `windows`
/// when set, otherwise `training.max_train_steps`.
fn train_steps(cfg: &RunConfig, windows: usize, batch: usize) -> u64 {
    let epochs: u64 = cfg.get("training.num_epochs");
    if epochs > 0 {
        epochs * windows.div_ceil(batch.max(1)).max(1) as u64
    } else {
        cfg.get("training.max_train_steps")
    }
}

pub fn gen_data(cfg: &RunConfig, seed: u64, threads: usize, out_dir: &Path, out: &mut dyn Write) -> Result<Dataset> {
    let objects: usize = cfg.get("objects");
    if objects == 0 || objects > TRAIN_OBJECTS.len() {
        return Err(CliError::Usage(format!("objects must lie in 1..={}", TRAIN_OBJECTS.len())));
    }
    let gen = GenConfig {
        objects: TRAIN_OBJECTS.take(objects).collect(),
        episodes: cfg.get("episodes"),
        seed,
        detector_samples: cfg.get("detector_samples"),
        threads,
    };
    let mut data = generate_dataset(&gen)?;
    data.manifest.insert("config_hash".into(), cfg.hash());
    write_dataset(out_dir, &data)?;
    writeln!(
        out,
        "stored {} episodes ({} rejected rollouts) in {}",
        data.episodes.len(),
        data.manifest.get("rejected_rollouts").map_or("0", String::as_str),
        out_dir.display()
    )?;
    Ok(data)
}

pub fn vae_config(cfg: &RunConfig) -> VaeConfig {
    VaeConfig {
        horizon: cfg.get("horizon"),
        latent_channels: cfg.get("n_latent_dims"),
        conv_channels: cfg.get("conv_latent_dims"),
        rnn_hidden: cfg.get("rnn_latent_dims"),
        kl_weight: cfg.get("kl_multiplier"),
        guided: cfg.flag("latent_guidance"),
    }
}

pub fn train_vae(cfg: &RunConfig, seed: u64, data: &Dataset, out: &mut dyn Write) -> Result<(VaeTrainer, String)> {
    let config = vae_config(cfg);
    let windows = Windows::new(&data.episodes, config.horizon, false);
    let samples = windows.chunks();
    if samples.is_empty() {
        return Err(CliError::Data("dataset has no training windows".into()));
    }
    let batch: usize = cfg.get("dataloader.batch_size");
    let train = VaeTrainConfig {
        batch_size: batch,
        lr: cfg.get("optimizer.lr"),
        weight_decay: cfg.get("optimizer.weight_decay"),
        warmup_steps: cfg.get("training.lr_warmup_steps"),
        steps: train_steps(cfg, samples.len(), batch),
    };
    let mut trainer = VaeTrainer::new(config, train, seed)?;
    let mut log = String::new();
    trainer.run(&samples, |s, l| {
        let _ = writeln!(log, "{s} {l:e}");
        if s % LOG_EVERY == 0 {
            let _ = writeln!(out, "vae step {s} loss {l:.4e}");
        }
    })?;
    Ok((trainer, log))
}

pub fn vae_checkpoint(trainer: &VaeTrainer, cfg: &RunConfig, data: &Dataset) -> Checkpoint {
    let mut ck = trainer.to_checkpoint();
    stamp(&mut ck, cfg);
    if let Some(h) = data.manifest.get("config_hash") {
        ck.set("data_config_hash", h);
    }
    ck
}

pub fn ldp_config(cfg: &RunConfig, vae: &VaeModel) -> Result<LdpConfig> {
    let dims = parse_dims(cfg.text("unet.down_dims")).ok_or_else(|| CliError::Usage("unet.down_dims".into()))?;
    let c = LdpConfig {
        latent_channels: vae.vae.config.latent_channels,
        latent_len: vae.vae.config.latent_len(),
        down_dims: dims,
        kernel_size: cfg.get("unet.kernel_size"),
        n_groups: cfg.get("unet.n_groups"),
        step_embed_dim: cfg.get("unet.diffusion_step_embed_dim"),
        obs_feature_dim: cfg.get("obs_feature_dim"),
        train_timesteps: cfg.get("num_training_timesteps"),
        inference_steps: cfg.get("num_inference_timesteps"),
        use_cue: cfg.flag("use_cue"),
        use_recon: cfg.flag("use_recon"),
        recon_weight: cfg.get("recon_loss_weight"),
        condition_guidance: cfg.flag("condition_guidance"),
    };
    c.validate()?;
    Ok(c)
}

pub fn train_ldp(
    cfg: &RunConfig,
    seed: u64,
    data: &Dataset,
    vae: Option<&VaeModel>,
    out: &mut dyn Write,
) -> Result<(LdpTrainer, String)> {
    let vae = vae.ok_or(DiffusionError::MissingVae)?;
    let config = ldp_config(cfg, vae)?;
    let windows = Windows::new(&data.episodes, vae.vae.config.horizon, config.use_cue);
    let samples = windows.chunks();
    if samples.is_empty() {
        return Err(CliError::Data("dataset has no training windows".into()));
    }
    let latents = vae.encode_all(&samples, ENCODE_BATCH)?;
    drop(samples);
    let batch: usize = cfg.get("dataloader.batch_size");
    let train = LdpTrainConfig {
        batch_size: batch,
        lr: cfg.get("optimizer.lr"),
        weight_decay: cfg.get("optimizer.weight_decay"),
        warmup_steps: cfg.get("training.lr_warmup_steps"),
        steps: train_steps(cfg, windows.len(), batch),
        ema_power: cfg.get("training.ema_power"),
    };
    let mut trainer = LdpTrainer::new(config, train, &latents, seed)?;
    let mut log = String::new();
    trainer.run(&windows, &latents, |s, l| {
        let _ = writeln!(log, "{s} {l:e}");
        if s % LOG_EVERY == 0 {
            let _ = writeln!(out, "ldp step {s} loss {l:.4e}");
        }
    })?;
    Ok((trainer, log))
}

pub fn ldp_checkpoint(trainer: &LdpTrainer, cfg: &RunConfig, vae_ck: &Checkpoint) -> Checkpoint {
    let mut ck = trainer.to_checkpoint();
    stamp(&mut ck, cfg);
    if let Some(h) = vae_ck.get("config_hash") {
        ck.set("vae_config_hash", h);
    }
    ck
}

pub fn eval_config(cfg: &RunConfig) -> Result<EvalConfig> {
    let strategy: Strategy = cfg
        .text("select")
        .parse()
        .map_err(|e: graspldp::hps::HpsError| CliError::Usage(e.to_string()))?;
    let weights = DistanceWeights::new(cfg.get("hps.w_t"), cfg.get("hps.w_r"))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let c = EvalConfig {
        strategy,
        selector: SelectorConfig {
            k: cfg.get("hps.k"),
            weights,
            ..SelectorConfig::default()
        },
        detector_samples: cfg.get("detector_samples"),
        detect_once: cfg.flag("detect_once"),
        action_horizon: cfg.get("action_horizon"),
        discard: cfg.get("discard_first"),
        ..EvalConfig::default()
    };
    c.validate()?;
    Ok(c)
}

/// Builds the inference policy and checks it against the expected ablation flags.
pub fn load_policy(vae_ck: &Checkpoint, ldp_ck: &Checkpoint, cfg: &RunConfig) -> Result<LatentPolicy> {
    let vae = VaeModel::from_checkpoint(vae_ck)?;
    let ldp = LdpModel::from_checkpoint(ldp_ck)?;
    let mismatch = |what: &str, want: bool, have: bool| {
        CliError::from(EvalError::CheckpointMismatch(format!(
            "{what} requested as {want} but the denoiser was trained with {have}"
        )))
    };
    let (want_cue, have_cue) = (cfg.flag("use_cue"), ldp.config().use_cue);
    if want_cue != have_cue {
        return Err(mismatch("use_cue", want_cue, have_cue));
    }
    let (want_cg, have_cg) = (cfg.flag("condition_guidance"), ldp.config().condition_guidance);
    if want_cg != have_cg {
        return Err(mismatch("condition_guidance", want_cg, have_cg));
    }
    if let (Some(a), Some(b)) = (ldp_ck.get("vae_config_hash"), vae_ck.get("config_hash")) {
        if a != b {
            return Err(EvalError::CheckpointMismatch("denoiser was trained on a different autoencoder".into()).into());
        }
    }
    Ok(LatentPolicy::new(vae, ldp)?)
}

pub fn evaluate(
    cfg: &RunConfig,
    seed: u64,
    threads: usize,
    policy: &LatentPolicy,
    out: &mut dyn Write,
) -> Result<(Vec<(String, String)>, ResultsFile)> {
    let suite: Suite = cfg.text("suite").parse().map_err(|e: graspldp::simworld::SimError| CliError::Usage(e.to_string()))?;
    let config = eval_config(cfg)?;
    let n: usize = cfg.get("episodes");
    let results = if suite.is_cluttered() {
        let (scenes, trials) = run_cluttered_suite(policy, suite, n, seed, &config, threads)?;
        ResultsFile { trials, scenes }
    } else {
        ResultsFile {
            trials: run_suite(policy, suite, n, seed, &config, threads)?,
            scenes: Vec::new(),
        }
    };
    let header = vec![
        ("config_hash".to_string(), cfg.hash()),
        ("seed".to_string(), seed.to_string()),
        ("pipeline_digest".to_string(), pipeline_digest(policy, &config)?),
    ];
    if !results.trials.is_empty() {
        write!(out, "{}", report_table(&results)?)?;
    }
    Ok((header, results))
}

pub fn report(paths: &[PathBuf], out: &mut dyn Write) -> Result<String> {
    let mut all = ResultsFile::default();
    for p in paths {
        let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        all.extend(parse_results(&text)?);
    }
    let table = report_table(&all)?;
    write!(out, "{table}")?;
    Ok(table)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::GenData {
            objects,
            episodes,
            out: dir,
            cfg,
        } => {
            let mut extra = Vec::new();
            if let Some(o) = objects {
                extra.push(("objects", o.to_string()));
            }
            if let Some(e) = episodes {
                extra.push(("episodes", e.to_string()));
            }
            let rc = resolve(Section::GenData, cfg, &extra)?;
            announce(out, &rc, cfg.seed)?;
            gen_data(&rc, cfg.seed, cli.threads, dir, out)?;
        }
        Command::TrainVae {
            data,
            out: path,
            no_latent_guidance,
            cfg,
        } => {
            let mut extra = Vec::new();
            if *no_latent_guidance {
                extra.push(("latent_guidance", "false".to_string()));
            }
            let rc = resolve(Section::TrainVae, cfg, &extra)?;
            announce(out, &rc, cfg.seed)?;
            let dataset = read_dataset(data)?;
            let (trainer, log) = train_vae(&rc, cfg.seed, &dataset, out)?;
            let ck = vae_checkpoint(&trainer, &rc, &dataset);
            ensure_parent(path)?;
            write_checkpoint(path, &ck)?;
            write_file(&loss_log_path(path), log.as_bytes())?;
            writeln!(out, "wrote {}", path.display())?;
        }
        Command::TrainLdp {
            data,
            vae,
            out: path,
            no_cue,
            condition_guidance,
            cfg,
        } => {
            let mut extra = Vec::new();
            if *no_cue {
                extra.push(("use_cue", "false".to_string()));
                extra.push(("use_recon", "false".to_string()));
            }
            if *condition_guidance {
                extra.push(("condition_guidance", "true".to_string()));
            }
            let rc = resolve(Section::TrainLdp, cfg, &extra)?;
            if vae.is_none() {
                return Err(DiffusionError::MissingVae.into());
            }
            announce(out, &rc, cfg.seed)?;
            let vae_ck = vae.as_deref().map(load_checkpoint).transpose()?;
            let vae_model = vae_ck.as_ref().map(VaeModel::from_checkpoint).transpose()?;
            let dataset = read_dataset(data)?;
            let (trainer, log) = train_ldp(&rc, cfg.seed, &dataset, vae_model.as_ref(), out)?;
            let ck = ldp_checkpoint(&trainer, &rc, vae_ck.as_ref().expect("checked by train_ldp"));
            ensure_parent(path)?;
            write_checkpoint(path, &ck)?;
            write_file(&loss_log_path(path), log.as_bytes())?;
            writeln!(out, "wrote {}", path.display())?;
        }
        Command::Eval {
            vae,
            ldp,
            suite,
            episodes,
            select,
            detect_once,
            no_cue,
            condition_guidance,
            out: path,
            cfg,
        } => {
            let mut extra = Vec::new();
            if let Some(s) = suite {
                extra.push(("suite", s.clone()));
            }
            if let Some(e) = episodes {
                extra.push(("episodes", e.to_string()));
            }
            if let Some(s) = select {
                extra.push(("select", s.clone()));
            }
            if *detect_once {
                extra.push(("detect_once", "true".to_string()));
            }
            if *no_cue {
                extra.push(("use_cue", "false".to_string()));
            }
            if *condition_guidance {
                extra.push(("condition_guidance", "true".to_string()));
            }
            let rc = resolve(Section::Eval, cfg, &extra)?;
            announce(out, &rc, cfg.seed)?;
            let vae_ck = load_checkpoint(vae)?;
            let ldp_ck = load_checkpoint(ldp)?;
            let policy = load_policy(&vae_ck, &ldp_ck, &rc)?;
            let (header, results) = evaluate(&rc, cfg.seed, cli.threads, &policy, out)?;
            write_file(path, format_results(&header, &results).as_bytes())?;
            writeln!(out, "wrote {}", path.display())?;
        }
        Command::Report { results } => {
            report(results, out)?;
        }
    }
    Ok(())
}
