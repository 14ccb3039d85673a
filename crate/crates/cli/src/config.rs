//! Plain `key=value` run configuration with a fixed key set per command.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Count,
    Real,
    Flag,
    Dims,
    Text,
    /// Accepted only at this value.
    Fixed(&'static str),
}

#[derive(Debug, Clone, Copy)]
struct KeySpec {
    name: &'static str,
    kind: Kind,
    default: &'static str,
}

const fn key(name: &'static str, kind: Kind, default: &'static str) -> KeySpec {
    KeySpec { name, kind, default }
}

const fn fixed(name: &'static str, value: &'static str) -> KeySpec {
    KeySpec {
        name,
        kind: Kind::Fixed(value),
        default: value,
    }
}

const GEN_DATA_KEYS: &[KeySpec] = &[
    key("objects", Kind::Count, "10"),
    key("episodes", Kind::Count, "50"),
    key("detector_samples", Kind::Count, "48"),
];

const TRAIN_VAE_KEYS: &[KeySpec] = &[
    key("horizon", Kind::Count, "16"),
    fixed("n_obs_steps", "2"),
    key("n_latent_dims", Kind::Count, "16"),
    fixed("use_conv_encoder", "true"),
    key("conv_latent_dims", Kind::Count, "64"),
    fixed("conv_layer_num", "1"),
    fixed("use_rnn_decoder", "true"),
    key("rnn_latent_dims", Kind::Count, "64"),
    fixed("rnn_layer_num", "1"),
    key("kl_multiplier", Kind::Real, "1e-6"),
    fixed("use_vq", "false"),
    key("latent_guidance", Kind::Flag, "true"),
    key("dataloader.batch_size", Kind::Count, "128"),
    key("optimizer.lr", Kind::Real, "1e-3"),
    key("optimizer.weight_decay", Kind::Real, "1e-4"),
    fixed("training.lr_scheduler", "cosine"),
    key("training.lr_warmup_steps", Kind::Count, "100"),
    key("training.max_train_steps", Kind::Count, "2000"),
    key("training.num_epochs", Kind::Count, "0"),
];

const TRAIN_LDP_KEYS: &[KeySpec] = &[
    fixed("observation_horizon", "2"),
    key("action_horizon", Kind::Count, "8"),
    key("unet.diffusion_step_embed_dim", Kind::Count, "64"),
    key("unet.down_dims", Kind::Dims, "[32,64,128]"),
    key("unet.kernel_size", Kind::Count, "5"),
    key("unet.n_groups", Kind::Count, "8"),
    key("obs_feature_dim", Kind::Count, "64"),
    fixed("enable_ddim", "true"),
    key("num_training_timesteps", Kind::Count, "100"),
    key("num_inference_timesteps", Kind::Count, "10"),
    fixed("prediction_type", "epsilon"),
    key("use_cue", Kind::Flag, "true"),
    key("use_recon", Kind::Flag, "true"),
    key("recon_loss_weight", Kind::Real, "0.2"),
    key("condition_guidance", Kind::Flag, "false"),
    key("dataloader.batch_size", Kind::Count, "64"),
    key("optimizer.lr", Kind::Real, "1e-3"),
    key("optimizer.weight_decay", Kind::Real, "1e-6"),
    fixed("training.lr_scheduler", "cosine"),
    key("training.lr_warmup_steps", Kind::Count, "100"),
    key("training.max_train_steps", Kind::Count, "3000"),
    key("training.num_epochs", Kind::Count, "0"),
    fixed("training.use_ema", "true"),
    key("training.ema_power", Kind::Real, "0.75"),
];

const EVAL_KEYS: &[KeySpec] = &[
    key("suite", Kind::Text, "in-domain"),
    key("episodes", Kind::Count, "200"),
    key("select", Kind::Text, "hps"),
    key("detect_once", Kind::Flag, "false"),
    key("action_horizon", Kind::Count, "8"),
    key("discard_first", Kind::Count, "0"),
    key("detector_samples", Kind::Count, "48"),
    key("hps.k", Kind::Count, "30"),
    key("hps.w_t", Kind::Real, "100"),
    key("hps.w_r", Kind::Real, "20"),
    key("use_cue", Kind::Flag, "true"),
    key("condition_guidance", Kind::Flag, "false"),
];

/// Which command a configuration belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    GenData,
    TrainVae,
    TrainLdp,
    Eval,
}

impl Section {
    pub fn name(&self) -> &'static str {
        match self {
            Section::GenData => "gen-data",
            Section::TrainVae => "train-vae",
            Section::TrainLdp => "train-ldp",
            Section::Eval => "eval",
        }
    }

    fn keys(&self) -> &'static [KeySpec] {
        match self {
            Section::GenData => GEN_DATA_KEYS,
            Section::TrainVae => TRAIN_VAE_KEYS,
            Section::TrainLdp => TRAIN_LDP_KEYS,
            Section::Eval => EVAL_KEYS,
        }
    }
}

/// Resolved settings of one command: defaults, then a config file, then
/// command-line overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub section: Section,
    values: BTreeMap<String, String>,
}

fn parse_flag(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

pub fn parse_dims(v: &str) -> Option<Vec<usize>> {
    let inner = v.trim().strip_prefix('[')?.strip_suffix(']')?;
    inner.split(',').map(|p| p.trim().parse().ok()).collect()
}

fn normalize(spec: &KeySpec, value: &str) -> Result<String, CliError> {
    let v = value.trim();
    let bad = || CliError::Usage(format!("invalid value {v:?} for {}", spec.name));
    Ok(match spec.kind {
        Kind::Count => v.parse::<u64>().map_err(|_| bad())?.to_string(),
        Kind::Real => {
            let x: f64 = v.parse().map_err(|_| bad())?;
            if !x.is_finite() {
                return Err(bad());
            }
            format!("{x:e}")
        }
        Kind::Flag => parse_flag(v).ok_or_else(bad)?.to_string(),
        Kind::Dims => {
            let d = parse_dims(v).filter(|d| !d.is_empty()).ok_or_else(bad)?;
            let parts: Vec<String> = d.iter().map(usize::to_string).collect();
            format!("[{}]", parts.join(","))
        }
        Kind::Text => {
            if v.is_empty() || v.contains(char::is_whitespace) {
                return Err(bad());
            }
            v.to_string()
        }
        Kind::Fixed(allowed) => {
            let same = match (parse_flag(v), parse_flag(allowed)) {
                (Some(a), Some(b)) => a == b,
                _ => v.eq_ignore_ascii_case(allowed),
            };
            if !same {
                return Err(CliError::Usage(format!("{} only supports {allowed}", spec.name)));
            }
            allowed.to_string()
        }
    })
}

impl RunConfig {
    pub fn new(section: Section) -> Self {
        let values = section
            .keys()
            .iter()
            .map(|k| (k.name.to_string(), k.default.to_string()))
            .collect();
        RunConfig { section, values }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let spec = self
            .section
            .keys()
            .iter()
            .find(|k| k.name == key)
            .ok_or_else(|| CliError::Usage(format!("unknown key {key:?} for {}", self.section.name())))?;
        let v = normalize(spec, value)?;
        self.values.insert(key.to_string(), v);
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Applies `KEY=VALUE` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), CliError> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override {o:?} is not KEY=VALUE")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> T {
        self.values
            .get(key)
            .and_then(|v| v.parse().ok())
            .unwrap_or_else(|| panic!("config key {key} is declared and validated"))
    }

    pub fn flag(&self, key: &str) -> bool {
        self.values.get(key).and_then(|v| parse_flag(v)).unwrap_or(false)
    }

    pub fn text(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Canonical text form: command line, then sorted `key=value` lines.
    pub fn canonical(&self) -> String {
        let mut s = format!("command={}\n", self.section.name());
        for (k, v) in &self.values {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}
