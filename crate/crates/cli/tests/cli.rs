use std::path::Path;
use std::process::{Command, Output};

use orca_core::config::RunConfig;

fn orca(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_orca")).args(args).env("ORCA_OUT", out).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn help_lists_every_config_key_with_its_default() {
    let dir = tempfile::tempdir().unwrap();
    let o = orca(dir.path(), &["train", "--help"]);
    assert_eq!(code(&o), 0);
    let help = String::from_utf8(o.stdout).unwrap();
    for (key, default) in RunConfig::default_keys() {
        assert!(help.contains(&format!("--{key}")), "missing {key}");
        assert!(help.contains(&format!("[default: {default}]")), "missing default of {key}");
    }
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&orca(dir.path(), &["ablate", "--axis", "heads"])), 2);
    assert_eq!(code(&orca(dir.path(), &["train", "--policy.momentum", "0.9"])), 2);
    assert_eq!(code(&orca(dir.path(), &["train", "--condition.variant", "clip"])), 2);
    assert_eq!(code(&orca(dir.path(), &["frobnicate"])), 2);
}

#[test]
fn missing_dataset_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = orca(dir.path(), &["train"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("gen-demos"));
}

#[test]
fn gen_demos_is_repeatable_and_guards_changes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("demos.orca");
    let out = out.to_str().unwrap();
    let args = ["gen-demos", "--env", "press_pad", "--seed", "3", "--out", out];
    assert_eq!(code(&orca(dir.path(), &args)), 0);
    let first = std::fs::read(out).unwrap();
    assert_eq!(code(&orca(dir.path(), &args)), 0);
    assert_eq!(first, std::fs::read(out).unwrap());
    let other = ["gen-demos", "--env", "press_pad", "--seed", "4", "--out", out];
    assert_eq!(code(&orca(dir.path(), &other)), 2);
    let mut forced = other.to_vec();
    forced.push("--overwrite");
    assert_eq!(code(&orca(dir.path(), &forced)), 0);
    assert_ne!(first, std::fs::read(out).unwrap());
}

#[test]
fn train_eval_and_overwrite_guard() {
    let dir = tempfile::tempdir().unwrap();
    let run = [
        "--env.demos",
        "1",
        "--condition.variant",
        "null",
        "--policy.epochs",
        "2",
        "--policy.hidden_sizes",
        "[16]",
        "--eval.every",
        "1",
        "--eval.episodes",
        "2",
    ];
    assert_eq!(code(&orca(dir.path(), &["gen-demos", "--n", "1"])), 0);
    let mut train = vec!["train"];
    train.extend(run);
    assert_eq!(code(&orca(dir.path(), &train)), 0);

    let mut cfg = RunConfig::default();
    for pair in run.chunks(2) {
        cfg.set(pair[0].trim_start_matches("--"), pair[1]).unwrap();
    }
    let run_dir = dir.path().join(cfg.hash());
    for f in ["config.toml", "evals.jsonl", "losses.json", "result.json", "checkpoints/e001.orca", "checkpoints/e002.orca"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    let result: serde_json::Value = serde_json::from_slice(&std::fs::read(run_dir.join("result.json")).unwrap()).unwrap();
    assert_eq!(result["config_hash"], cfg.hash());
    assert_eq!(result["checkpoints"].as_array().unwrap().len(), 2);
    let evals = std::fs::read_to_string(run_dir.join("evals.jsonl")).unwrap();
    assert_eq!(evals.lines().count(), 2);
    assert!(evals.lines().all(|l| l.contains(&cfg.hash())));

    assert_eq!(code(&orca(dir.path(), &train)), 2);

    let mut eval = vec!["eval", "--checkpoint", "e002", "--episodes", "2"];
    eval.extend(run);
    let o = orca(dir.path(), &eval);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let line: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(line["config_hash"], cfg.hash());
    assert_eq!(line["epoch"], 2);

    let mut forced = train.clone();
    forced.push("--overwrite");
    assert_eq!(code(&orca(dir.path(), &forced)), 0);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.toml");
    std::fs::write(&file, "[env]\nenv_id = \"two_link_reach\"\ndemos = 1\n").unwrap();
    let f = file.to_str().unwrap();
    let o = orca(dir.path(), &["gen-demos", "--config", f, "--env.demo_seed", "9"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("datasets/two_link_reach_n1_s9.orca").exists());
    std::fs::write(&file, "[env]\nenv = \"two_link_reach\"\n").unwrap();
    assert_eq!(code(&orca(dir.path(), &["gen-demos", "--config", f])), 2);
}
