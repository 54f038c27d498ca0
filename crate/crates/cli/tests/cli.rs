//! End-to-end exercises of the command-line interface.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_manymorph"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tiny_train_args(corpus: &Path, out: &Path, seed: &str) -> Vec<String> {
    [
        "train",
        "--robots",
        &corpus.display().to_string(),
        "--out",
        &out.display().to_string(),
        "--seed",
        seed,
        "--task",
        "flat",
        "--total-timesteps",
        "240",
        "--timesteps-per-rollout",
        "40",
        "--envs",
        "2",
        "--workers",
        "2",
        "--minibatch-size",
        "40",
        "--epochs",
        "2",
        "--episode-horizon",
        "30",
        "--d-model",
        "16",
        "--layers",
        "1",
        "--ff-dim",
        "32",
        "--n-max",
        "10",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[test]
fn full_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    run_ok(bin().args([
        "make-corpus",
        "--out",
        &corpus.display().to_string(),
        "--count",
        "2",
        "--seed",
        "7",
    ]));
    assert_eq!(std::fs::read_dir(&corpus).unwrap().count(), 2);

    let run_a = dir.path().join("run_a");
    run_ok(bin().args(tiny_train_args(&corpus, &run_a, "3")));
    let ckpt = run_a.join("checkpoint_final.bin");
    assert!(ckpt.exists());

    // identical seeds give byte-identical metrics
    let run_b = dir.path().join("run_b");
    run_ok(bin().args(tiny_train_args(&corpus, &run_b, "3")));
    let ma = std::fs::read(run_a.join("metrics.jsonl")).unwrap();
    let mb = std::fs::read(run_b.join("metrics.jsonl")).unwrap();
    assert_eq!(ma, mb, "same seed, same metrics bytes");

    // evaluation: runs, prints a table, deterministic across invocations
    let eval_json = dir.path().join("eval.json");
    let out = run_ok(bin().args([
        "evaluate",
        "--checkpoint",
        &ckpt.display().to_string(),
        "--robots",
        &corpus.display().to_string(),
        "--task",
        "flat",
        "--trials",
        "2",
        "--seed",
        "5",
        "--episode-horizon",
        "30",
        "--out",
        &eval_json.display().to_string(),
    ]));
    let table = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(table.contains("mean over robots"));
    let first = std::fs::read_to_string(&eval_json).unwrap();
    run_ok(bin().args([
        "evaluate",
        "--checkpoint",
        &ckpt.display().to_string(),
        "--robots",
        &corpus.display().to_string(),
        "--task",
        "flat",
        "--trials",
        "2",
        "--seed",
        "5",
        "--episode-horizon",
        "30",
        "--out",
        &eval_json.display().to_string(),
    ]));
    assert_eq!(first, std::fs::read_to_string(&eval_json).unwrap());

    // variants + zeroshot
    let suite = dir.path().join("suite");
    run_ok(bin().args([
        "make-variants",
        "--robots",
        &corpus.display().to_string(),
        "--out",
        &suite.display().to_string(),
        "--kinds",
        "gear,joint_angle",
        "--variants",
        "2",
        "--seed",
        "4",
    ]));
    let zs_json = dir.path().join("zs.json");
    let out = run_ok(bin().args([
        "zeroshot",
        "--checkpoint",
        &ckpt.display().to_string(),
        "--suite",
        &suite.join("manifest.json").display().to_string(),
        "--task",
        "flat",
        "--trials",
        "2",
        "--seed",
        "6",
        "--out",
        &zs_json.display().to_string(),
    ]));
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("gear"));
    assert!(text.contains("joint_angle"));

    // analysis targets
    let robot0 = corpus.join("robot_000.json");
    let analysis = dir.path().join("analysis");
    run_ok(bin().args([
        "analyze",
        "stablerank",
        "--checkpoint",
        &ckpt.display().to_string(),
        "--robot",
        &robot0.display().to_string(),
        "--steps",
        "10",
        "--out",
        &analysis.display().to_string(),
    ]));
    assert!(analysis.join("stable_rank.csv").exists());
    let pos_csv = dir.path().join("pos.csv");
    run_ok(bin().args([
        "analyze",
        "posembed",
        "--checkpoint",
        &ckpt.display().to_string(),
        "--out",
        &pos_csv.display().to_string(),
    ]));
    let lines = std::fs::read_to_string(&pos_csv).unwrap();
    assert_eq!(lines.lines().count(), 10, "n_max rows");
    let curves_csv = dir.path().join("curves.csv");
    run_ok(bin().args([
        "analyze",
        "curves",
        "--runs",
        &format!("{},{}", run_a.display(), run_b.display()),
        "--key",
        "loss_value",
        "--out",
        &curves_csv.display().to_string(),
    ]));
    let text = std::fs::read_to_string(&curves_csv).unwrap();
    assert!(text.starts_with("iteration,mean,std"));

    // transfer: scratch control runs and flags itself
    let xfer = dir.path().join("xfer");
    let mut args = tiny_train_args(&corpus, &xfer, "3");
    args[0] = "transfer".into();
    args.insert(1, "--checkpoint".into());
    args.insert(2, ckpt.display().to_string());
    args.insert(3, "--scratch".into());
    run_ok(bin().args(&args));
    let meta = std::fs::read_to_string(xfer.join("run.json")).unwrap();
    assert!(meta.contains("\"scratch\": true"));
}

#[test]
fn missing_corpus_exits_nonzero_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(tiny_train_args(
            &dir.path().join("no_such_corpus"),
            &dir.path().join("run"),
            "1",
        ))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("no_such_corpus"), "stderr: {stderr}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"task": "flat", "not_a_real_key": 1}"#).unwrap();
    let out = bin()
        .args(["train", "--config", &cfg.display().to_string()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("not_a_real_key"), "stderr: {stderr}");
}

#[test]
fn mm_seed_env_var_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    run_ok(bin().args([
        "make-corpus",
        "--out",
        &corpus.display().to_string(),
        "--count",
        "1",
        "--seed",
        "2",
    ]));
    let run_dir = dir.path().join("run");
    let mut cmd = bin();
    cmd.args(tiny_train_args(&corpus, &run_dir, "1"))
        .env("MM_SEED", "42");
    run_ok(&mut cmd);
    let cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("config.json")).unwrap())
            .unwrap();
    assert_eq!(cfg["seed"], 42);
}

#[test]
fn bad_task_name_is_a_usage_error() {
    let out = bin()
        .args([
            "evaluate",
            "--checkpoint",
            "x.bin",
            "--robots",
            "r",
            "--task",
            "swimming",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
