use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use dynacon::harness::ExperimentConfig;
use dynacon::sysid::PosteriorFile;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn dynacon(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dynacon")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) {
    let out = dynacon(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn shipped_configs_parse() {
    for entry in fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}

#[test]
fn full_pipeline_through_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).display().to_string();
    let cfg = configs().join("smoke.toml").display().to_string();

    ok(&["train-policy", "--config", &cfg, "--out", &p("policy")]);
    assert!(dir.path().join("policy/policy.bin").exists());
    ok(&["collect-offpolicy", "--config", &cfg, "--out", &p("data/train.jsonl")]);
    ok(&["train-sysid", "--config", &cfg, "--data", &p("data"), "--out", &p("sysid")]);
    ok(&["collect-offpolicy", "--config", &cfg, "--split", "test", "--first", "1", "--out", &p("test.jsonl")]);
    ok(&["estimate", "--model", &p("sysid"), "--data", &p("test.jsonl"), "--out", &p("posterior.json")]);
    let post: PosteriorFile = serde_json::from_slice(&fs::read(p("posterior.json")).unwrap()).unwrap();
    assert_eq!(post.mean.len(), 2);
    assert!(post.std.iter().all(|s| *s > 0.0));

    let eval = ["--config", &cfg, "--policy", &p("policy"), "--sysid", &p("sysid")];
    ok(&[&["evaluate-zero-shot"], &eval[..], &["--out", &p("zero_shot.csv")]].concat());
    assert_eq!(fs::read_to_string(p("zero_shot.csv")).unwrap().lines().count(), 4);
    ok(&[&["finetune"], &eval[..], &["--env-index", "1", "--out", &p("ft.csv"), "--checkpoint", &p("tuned")]].concat());
    assert_eq!(fs::read_to_string(p("ft.csv")).unwrap().lines().count(), 4);
    ok(&[&["collect-offpolicy", "--config", &cfg, "--policy", &p("tuned"), "--envs", "1"][..], &["--out", &p("safe.jsonl")]].concat());

    // Seed override changes the run; the same seed reproduces it.
    ok(&["collect-offpolicy", "--config", &cfg, "--seed", "4", "--out", &p("s4a.jsonl")]);
    ok(&["collect-offpolicy", "--config", &cfg, "--seed", "4", "--out", &p("s4b.jsonl")]);
    let a = fs::read(p("s4a.jsonl")).unwrap();
    assert_eq!(a, fs::read(p("s4b.jsonl")).unwrap());
    assert_ne!(a, fs::read(p("data/train.jsonl")).unwrap());
}

#[test]
fn protocols_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("smoke.toml").display().to_string();
    let out = dir.path().display().to_string();
    ok(&["ablate", "--config", &cfg, "--out", &out]);
    ok(&["sweep-ranges", "--config", &cfg, "--out", &out]);
    ok(&["noise-eval", "--config", &cfg, "--out", &out, "--k", "0,1"]);
    for f in ["ablation.csv", "range_sweep.csv", "noise_eval.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn failures_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[env]\nfamily = \"pendulum\"\n[policy]\n[ppo]\n[sysid]\n[eval]\noffpolicy_episodes = 0\n").unwrap();
    let out = dynacon(&["train-policy", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("offpolicy_episodes"));

    let missing = dynacon(&["estimate", "--model", "/nonexistent", "--data", "/nonexistent", "--out", "x.json"]);
    assert!(!missing.status.success());
    assert!(!dynacon(&["no-such-command"]).status.success());
}
