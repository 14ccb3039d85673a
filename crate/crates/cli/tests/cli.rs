use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use graspldp::datagen::read_dataset;
use graspldp::eval::parse_results;
use graspldp_cli::commands::load_checkpoint;

fn graspldp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graspldp"))
        .args(args)
        .env_remove(graspldp_cli::DATA_ENV)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_VAE: &[&str] = &[
    "--set", "training.max_train_steps=4",
    "--set", "dataloader.batch_size=8",
    "--set", "conv_latent_dims=8",
    "--set", "rnn_latent_dims=8",
    "--set", "training.lr_warmup_steps=1",
];

const TINY_LDP: &[&str] = &[
    "--set", "training.max_train_steps=3",
    "--set", "dataloader.batch_size=4",
    "--set", "unet.down_dims=[8,16]",
    "--set", "unet.n_groups=4",
    "--set", "unet.diffusion_step_embed_dim=8",
    "--set", "obs_feature_dim=16",
    "--set", "training.lr_warmup_steps=1",
];

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run(args: &[String]) -> Output {
    graspldp(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&graspldp(&["--help"])), 0);
    assert!(stdout(&graspldp(&["eval", "--help"])).contains("--detect-once"));
    assert_eq!(code(&graspldp(&["frobnicate"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert_eq!(code(&graspldp(&["gen-data", "--out", path(&out), "--set", "colour=blue"])), 1);
    assert_eq!(code(&graspldp(&["gen-data", "--out", path(&out), "--objects", "0"])), 1);
    assert_eq!(code(&graspldp(&["gen-data", "--out", path(&out), "--set", "use_vq=true"])), 1);
}

#[test]
fn empty_generation_writes_a_valid_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    let o = graspldp(&["gen-data", "--episodes", "0", "--out", path(&out)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("config_hash="));
    let data = read_dataset(&out).unwrap();
    assert!(data.episodes.is_empty());
    assert_eq!(data.manifest["episodes"], "0");
    let o = graspldp(&["train-vae", "--data", path(&out), "--out", path(&dir.path().join("v.ckpt"))]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&graspldp(&["train-vae", "--data", path(&dir.path().join("nowhere")), "--out", "x"])), 2);
}

#[test]
fn single_episode_generation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = graspldp(&["gen-data", "--objects", "1", "--episodes", "1", "--seed", "4", "--out", path(d)]);
        assert_eq!(code(&o), 0);
        assert!(stdout(&o).contains("rejected rollouts"));
    }
    let data = read_dataset(&a).unwrap();
    let rejected: usize = data.manifest["rejected_rollouts"].parse().unwrap();
    assert!(data.episodes.len() == 1 || rejected > 0);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let data = p("data");
    assert_eq!(code(&graspldp(&["gen-data", "--objects", "2", "--episodes", "2", "--seed", "1", "--out", &data])), 0);

    let o = graspldp(&["train-ldp", "--data", &data, "--out", &p("l.ckpt")]);
    assert_eq!(code(&o), 1, "missing autoencoder is a usage error");

    let vae = p("v.ckpt");
    let o = run(&with(&["train-vae", "--data", &data, "--out", &vae], TINY_VAE));
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let printed = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("config_hash=").map(str::to_string))
        .unwrap();
    let ck = load_checkpoint(Path::new(&vae)).unwrap();
    assert_eq!(ck.get("config_hash").unwrap(), printed);
    assert!(fs::read_to_string(format!("{vae}.loss.txt")).unwrap().lines().count() == 4);

    let ldp = p("l.ckpt");
    let o = run(&with(&["train-ldp", "--data", &data, "--vae", &vae, "--out", &ldp], TINY_LDP));
    assert_eq!(code(&o), 0, "{}", stdout(&o));

    let results = p("r.txt");
    let eval = ["eval", "--vae", &vae, "--ldp", &ldp, "--episodes", "2", "--select", "random", "--out", &results];
    let o = graspldp(&eval);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let file = parse_results(&fs::read_to_string(&results).unwrap()).unwrap();
    assert_eq!(file.trials.len(), 2);

    let o = graspldp(&["eval", "--vae", &vae, "--ldp", &ldp, "--episodes", "1", "--no-cue", "--out", &p("x.txt")]);
    assert_eq!(code(&o), 2, "cue flag must match the checkpoint");
    let o = graspldp(&["eval", "--vae", &vae, "--ldp", &ldp, "--select", "psychic", "--out", &p("x.txt")]);
    assert_eq!(code(&o), 1);

    let o = graspldp(&["report", "--results", &results, &results]);
    assert_eq!(code(&o), 0);
    let ok = file.trials.iter().filter(|t| t.success).count();
    let row = stdout(&o).lines().find(|l| l.starts_with("in-domain")).unwrap().to_string();
    let cols: Vec<&str> = row.split_whitespace().collect();
    assert_eq!(cols[1], "4");
    assert_eq!(cols[2], format!("{:.1}", 100.0 * ok as f64 / 2.0));

    let empty = p("empty.txt");
    fs::write(&empty, "# nothing yet\n").unwrap();
    let o = graspldp(&["report", "--results", &empty]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).contains("no trial results"));
}

#[test]
fn divergent_training_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&graspldp(&["gen-data", "--objects", "1", "--episodes", "1", "--out", path(&data)])), 0);
    let args = with(
        &["train-vae", "--data", path(&data), "--out", path(&dir.path().join("v.ckpt"))],
        &with(TINY_VAE, &["--set", "optimizer.lr=1e300"]).iter().map(String::as_str).collect::<Vec<_>>(),
    );
    let o = run(&args);
    assert_eq!(code(&o), 3, "{}", stdout(&o));
}
