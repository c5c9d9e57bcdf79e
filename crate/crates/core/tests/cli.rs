use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_coinlab");

const TINY: &str = r#"
seed = 5

[train]
steps = 1024
probe_levels = 2
probe_every = 1

[train.ppo]
hidden = [8]
rollout_steps = 256
n_envs = 2
minibatch = 64
epochs = 1

[explore]
episodes = 6
steps_per_episode = 20

[collect]
episodes = 100
neg_per_pos = 4

[extrapolate]
epochs = 3
hidden = [8]

[disambiguate]
k = 2
timestamp = 1700000000

[finetune]
steps = 512

[eval]
n_levels = 12
train_n_levels = 12

[detect]
n_levels = 12
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn gen_is_deterministic_per_seed_and_mode() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--seed", "42", "--mode", "train", "--out", "a/level.mgl"]);
    ok(d, &["gen", "--seed", "42", "--mode", "train", "--out", "b/level.mgl"]);
    ok(d, &["gen", "--seed", "42", "--mode", "test", "--out", "c/level.mgl"]);
    let a = std::fs::read(d.join("a/level.mgl")).unwrap();
    let b = std::fs::read(d.join("b/level.mgl")).unwrap();
    let c = std::fs::read(d.join("c/level.mgl")).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let level = coinlab::level::Level::from_mgl(&String::from_utf8(a).unwrap()).unwrap();
    assert!(coinlab::levelgen::validate_level(&level).is_valid());
    assert!(d.join("a/manifest.json").exists());
}

#[test]
fn report_without_evaluations_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &["report", "--baseline", "b.json", "--standard", "s.json", "--prudent", "p.json", "--ace", "a.json", "--out", "r.csv"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing input"));
}

#[test]
fn unknown_flag_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gen", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn finetune_requires_a_choice_or_prudent() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["finetune", "--policy", "p.json", "--pair", "q.json", "--out", "x.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn tiny_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    let c = ["--config", "tiny.toml"];
    let with = |args: &[&'static str]| -> Vec<&'static str> { c.iter().copied().chain(args.iter().copied()).collect() };

    ok(d, &with(&["train", "--out", "run/standard.json"]));
    assert!(d.join("run/standard.train.csv").exists());
    ok(d, &with(&["explore", "--out", "run/unlabeled.jsonl"]));
    ok(d, &with(&["collect", "--policy", "run/standard.json", "--out", "run/labeled.jsonl"]));

    let ex = run(d, &with(&["extrapolate", "--labeled", "run/labeled.jsonl", "--unlabeled", "run/unlabeled.jsonl", "--out", "run/pair.json"]));
    assert!(matches!(ex.status.code(), Some(0) | Some(2)), "{}", String::from_utf8_lossy(&ex.stderr));
    assert!(d.join("run/pair.json").exists());

    ok(d, &with(&["disambiguate", "--pair", "run/pair.json", "--unlabeled", "run/unlabeled.jsonl", "--bit", "1", "--out", "run/panel"]));
    let choice = coinlab::disambiguate::ChoiceManifest::load(&d.join("run/panel/choice.json")).unwrap();
    assert_eq!(choice.bit, 1);
    assert!(d.join("run/panel/head0_rank0.pgm").exists());

    ok(d, &with(&["finetune", "--policy", "run/standard.json", "--pair", "run/pair.json", "--choice", "run/panel/choice.json", "--out", "run/ace.json"]));
    ok(d, &with(&["finetune", "--policy", "run/standard.json", "--pair", "run/pair.json", "--prudent", "--out", "run/prudent.json"]));

    for (policy, name) in [("baseline", "baseline"), ("run/standard.json", "standard"), ("run/prudent.json", "prudent"), ("run/ace.json", "ace")] {
        let out = format!("run/eval_{name}.json");
        let args: Vec<&str> = c.iter().copied().chain(["eval", "--policy", policy, "--label", name, "--out", out.as_str()]).collect();
        ok(d, &args);
    }
    ok(
        d,
        &with(&[
            "report", "--baseline", "run/eval_baseline.json", "--standard", "run/eval_standard.json", "--prudent", "run/eval_prudent.json",
            "--ace", "run/eval_ace.json", "--plot-data", "run/plot.csv", "--out", "run/report.csv",
        ]),
    );
    let csv = std::fs::read_to_string(d.join("run/report.csv")).unwrap();
    for name in ["baseline", "standard", "prudent", "ace"] {
        assert!(csv.contains(name), "{csv}");
    }
    assert!(d.join("run/report.json").exists());

    ok(d, &with(&["play", "--policy", "run/ace.json", "--seed", "3", "--max-steps", "10", "--out", "run/play"]));
    assert!(d.join("run/play/frame_0000.pgm").exists());
    assert!(d.join("run/play/actions.csv").exists());
    ok(d, &with(&["detect", "--policy", "coin-seeker", "--out", "run/detect.json"]));

    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("run/manifest.json")).unwrap()).unwrap();
    let stages: Vec<&str> = manifest["stages"].as_array().unwrap().iter().map(|s| s["stage"].as_str().unwrap()).collect();
    for s in ["train", "explore", "collect", "extrapolate", "disambiguate", "finetune", "eval", "report", "detect"] {
        assert!(stages.contains(&s), "{s} missing from {stages:?}");
    }
}

#[test]
fn eval_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a/eval.json", "b/eval.json"] {
        ok(d, &["eval", "--policy", "baseline", "--n-levels", "20", "--out", out]);
    }
    assert_eq!(std::fs::read(d.join("a/eval.json")).unwrap(), std::fs::read(d.join("b/eval.json")).unwrap());
}
