//! End-to-end tests of the bdlab binary: exit codes, artifact layout, and
//! the resolved-config echo.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bdlab() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bdlab"));
    // the env override must not leak between tests
    cmd.env_remove("BDLAB_OUT");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn bdlab")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Tiny leftcontext setup: 100 sentences, 2-layer d=8 model, one epoch.
fn tiny_config(dir: &Path, extra: &[(&str, Value)]) -> PathBuf {
    let mut cfg = json!({
        "task": "leftcontext",
        "n_sentences": 100,
        "data_seed": 7,
        "pretrain_steps": 5,
        "out_dir": dir.join("runs").to_str().unwrap(),
        "model": { "d_model": 8, "heads": 2, "n_layers": 2, "d_ff": 16 },
        "train": { "epochs": 1, "batch_size": 8, "grad_accum": 1, "lr": 3e-3, "seed": 3 }
    });
    for (path, v) in extra {
        let mut node = &mut cfg;
        let parts: Vec<&str> = path.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            node = &mut node[p];
        }
        node[parts[parts.len() - 1]] = v.clone();
    }
    let file = dir.join("config.json");
    std::fs::write(&file, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    file
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn pretrain_finetune_report_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), &[]);
    let runs = tmp.path().join("runs");

    let out = run(bdlab().args(["pretrain", "--config"]).arg(&cfg));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(runs.join("pretrain_leftcontext_s3.ckpt.json").is_file());
    let report = read_json(&runs.join("pretrain_leftcontext_s3.report.json"));
    assert_eq!(report["steps"], 5);
    assert_eq!(report["resolved_config"]["task"], "leftcontext");

    let out = run(bdlab()
        .args(["finetune", "--config"])
        .arg(&cfg)
        .args(["--strategy", "repeat", "--r", "1", "--seed", "3,4", "--jobs", "2"]));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for seed in [3, 4] {
        let manifest = read_json(&runs.join(format!("leftcontext_repeat_r1_L0_s{seed}.json")));
        assert_eq!(manifest["resolved_config"]["train"]["seed"], seed);
        assert_eq!(manifest["config"]["r"], 1);
        assert!(manifest["test_f1"].is_f64());
        assert!(runs
            .join(format!("leftcontext_repeat_r1_L0_s{seed}.ckpt.json"))
            .is_file());
    }

    let out = run(bdlab().args(["report", "--runs"]).arg(&runs));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(runs.join("report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "task,strategy,r,exit_layer,seeds,mean_f1,ci95,best"
    );
    let row = lines.next().unwrap();
    assert!(row.starts_with("leftcontext,repeat,1,0,2,"), "{row}");
    assert!(row.ends_with(",1"), "single cell must be the best: {row}");
    assert!(runs.join("report.md").is_file());
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let out = run(bdlab().args(["pretrain", "--config"]).arg(&bad));
    assert_eq!(code(&out), 2);

    let unknown = tmp.path().join("unknown.json");
    std::fs::write(&unknown, r#"{ "bogus_key": 1 }"#).unwrap();
    let out = run(bdlab().args(["pretrain", "--config"]).arg(&unknown));
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bogus_key"));

    let out = run(bdlab().args(["pretrain", "--config", "/nonexistent/c.json"]));
    assert_eq!(code(&out), 2);
}

#[test]
fn induced_divergence_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    // decoupled decay at lr 10 shrinks weights by half per step and lets the
    // run stabilize, so the failure induction disables it
    let cfg = tiny_config(
        tmp.path(),
        &[
            ("train.lr", json!(10.0)),
            ("train.weight_decay", json!(0.0)),
            ("pretrain_steps", json!(300)),
        ],
    );
    let out = run(bdlab().args(["pretrain", "--config"]).arg(&cfg));
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"), "{}", stderr(&out));
}

#[test]
fn illegal_strategy_combos_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), &[]);
    for (strategy, r) in [("full_unmask", "1"), ("middle_unmask", "2"), ("masked", "1")] {
        let out = run(bdlab()
            .args(["finetune", "--config"])
            .arg(&cfg)
            .args(["--strategy", strategy, "--r", r]));
        assert_eq!(code(&out), 2, "{strategy} --r {r} must be rejected");
        assert!(stderr(&out).contains("repeat"), "{}", stderr(&out));
    }
    let out = run(bdlab()
        .args(["finetune", "--config"])
        .arg(&cfg)
        .args(["--strategy", "bogus"]));
    assert_eq!(code(&out), 2);
}

#[test]
fn analyze_mask_dumps_block_structure() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("mask");
    let out = run(bdlab()
        .args(["analyze-mask", "--n", "3", "--k", "2", "--out"])
        .arg(&out_dir));
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let blocks = read_json(&out_dir.join("blocks_n3_k2.json"));
    assert_eq!(blocks["share_bidirectional"].as_f64().unwrap(), 1.0 / 3.0);
    let layers = blocks["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 6);
    for heads in layers {
        for report in heads.as_array().unwrap() {
            assert_eq!(
                report["classes"],
                json!([["LowerTriangular", "Zero"], ["Dense", "LowerTriangular"]])
            );
        }
    }
    let csv = std::fs::read_to_string(out_dir.join("attention_n3_k2.csv")).unwrap();
    // header + 6 layers x 4 heads x 36 weights
    assert_eq!(csv.lines().count(), 1 + 6 * 4 * 36);

    let out = run(bdlab()
        .args(["analyze-mask", "--n", "4", "--k", "1", "--out"])
        .arg(&out_dir));
    assert_eq!(code(&out), 0);
    let blocks = read_json(&out_dir.join("blocks_n4_k1.json"));
    assert_eq!(blocks["share_bidirectional"].as_f64().unwrap(), 0.0);

    // 86 * 3 = 258 > 256
    let out = run(bdlab()
        .args(["analyze-mask", "--n", "86", "--k", "3", "--out"])
        .arg(&out_dir));
    assert_eq!(code(&out), 2);
}

#[test]
fn profile_emits_speedup_and_theory_grids() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), &[]);
    let out_dir = tmp.path().join("prof");
    let out = run(bdlab()
        .args(["profile", "--config"])
        .arg(&cfg)
        .args(["--exits", "2", "--reps", "1,2", "--out"])
        .arg(&out_dir));
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let speedup = std::fs::read_to_string(out_dir.join("profile_speedup.csv")).unwrap();
    let lines: Vec<&str> = speedup.lines().collect();
    assert_eq!(lines[0], "exit,r=1,r=2");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("2,"));
    assert!(out_dir.join("profile_theory.csv").is_file());

    let report = read_json(&out_dir.join("profile.json"));
    let rho = report["spearman"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&rho));
    assert!(report["base_seconds"].as_f64().unwrap() > 0.0);
    assert_eq!(report["resolved_config"]["n_sentences"], 100);
}

#[test]
fn report_needs_two_seeds_per_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), &[]);
    let runs = tmp.path().join("runs");
    let out = run(bdlab()
        .args(["finetune", "--config"])
        .arg(&cfg)
        .args(["--seed", "5"]));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = run(bdlab().args(["report", "--runs"]).arg(&runs));
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains("leftcontext/masked/r0/L0"),
        "must name the cell: {}",
        stderr(&out)
    );
}

#[test]
fn finetune_from_checkpoint_attaches_adapters() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), &[("train.lora_rank", json!(2))]);
    let runs = tmp.path().join("runs");
    let out = run(bdlab().args(["pretrain", "--config"]).arg(&cfg));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = run(bdlab()
        .args(["finetune", "--config"])
        .arg(&cfg)
        .arg("--init")
        .arg(runs.join("pretrain_leftcontext_s3.ckpt.json"))
        .args(["--seed", "8"]));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ckpt = read_json(&runs.join("leftcontext_masked_r0_L0_s8.ckpt.json"));
    assert_eq!(ckpt["lora"]["rank"], 2);
    assert!(ckpt["params"]["layer0.lora_q.a"].is_array());
}

#[test]
fn bdlab_out_env_overrides_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let env_dir = tmp.path().join("env_out");
    let flag_dir = tmp.path().join("flag_out");
    let out = run(bdlab()
        .env("BDLAB_OUT", &env_dir)
        .args(["analyze-mask", "--n", "2", "--k", "1", "--out"])
        .arg(&flag_dir));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(env_dir.join("blocks_n2_k1.json").is_file());
    assert!(!flag_dir.exists());
}

#[test]
fn finetune_is_idempotent_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), &[]);
    let runs = tmp.path().join("runs");
    let path = runs.join("leftcontext_masked_r0_L0_s3.json");
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        let out = run(bdlab().args(["finetune", "--config"]).arg(&cfg));
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        snapshots.push(read_json(&path));
    }
    // wall-clock fields differ between invocations; everything else must not
    assert_eq!(snapshots[0]["resolved_config"], snapshots[1]["resolved_config"]);
    assert_eq!(snapshots[0]["config"], snapshots[1]["config"]);
    assert_eq!(snapshots[0]["test_f1"], snapshots[1]["test_f1"]);
    assert_eq!(snapshots[0]["val_f1_per_epoch"], snapshots[1]["val_f1_per_epoch"]);
    assert_eq!(snapshots[0]["best_epoch"], snapshots[1]["best_epoch"]);
}
