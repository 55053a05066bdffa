use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use glag::data::load_embeddings;
use glag::pipeline::RunConfig;

fn glag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glag"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = glag(args);
    assert!(
        out.status.success(),
        "glag {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn small_config() -> RunConfig {
    shrink(RunConfig::default())
}

/// Desk-test sizes on top of `c`.
fn shrink(c: RunConfig) -> RunConfig {
    RunConfig {
        seeds: vec![0, 1],
        num_classes: 6,
        max_count: 60,
        imbalance: 10.0,
        dim: 6,
        val_per_class: 15,
        test_per_class: 15,
        hidden: vec![12, 8],
        stage1_epochs: 4,
        stage2_epochs: 3,
        probe_epochs: 3,
        many_min: 30,
        few_max: 10,
        ..c
    }
}

fn write_config(dir: &Path, name: &str, c: &RunConfig) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, c.to_json()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A temp dir with `config.json` and a synthesized dataset under `data/`.
fn setup() -> (tempfile::TempDir, PathBuf, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.json", &small_config());
    let data = tmp.path().join("data");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data), "--seed", "3"]);
    (tmp, cfg, data)
}

fn metrics(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap()
}

#[test]
fn synth_writes_splits_and_ground_truth() {
    let (tmp, cfg, data) = setup();
    for f in ["train.emb", "val.emb", "test.emb", "probe.emb", "truth.json", "config.json"] {
        assert!(data.join(f).exists(), "{f} missing");
    }
    let train = load_embeddings(data.join("train.emb")).unwrap();
    assert_eq!(train.class_counts()[0], 60);
    assert_eq!(train.class_counts()[5], 6);
    let truth: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(data.join("truth.json")).unwrap()).unwrap();
    assert_eq!(truth["means"].as_array().unwrap().len(), 6);

    let again = tmp.path().join("again");
    ok(&["synth", "--config", s(&cfg), "--out", s(&again), "--seed", "3"]);
    for f in ["train.emb", "val.emb", "test.emb", "probe.emb", "truth.json"] {
        assert_eq!(fs::read(data.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f} differs");
    }

    let flat = tmp.path().join("flat");
    ok(&["synth", "--config", s(&cfg), "--out", s(&flat), "--im", "1"]);
    let train = load_embeddings(flat.join("train.emb")).unwrap();
    assert!(train.class_counts().iter().all(|&n| n == 60));
}

#[test]
fn stage_one_only_writes_no_stage_two_checkpoint() {
    let (tmp, cfg, data) = setup();
    let out = tmp.path().join("s1");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--stage", "1"]);
    assert!(out.join("m1.ckpt").exists());
    assert!(!out.join("m2.ckpt").exists());
    let m = metrics(&out);
    assert_eq!(m["reports"].as_array().unwrap().len(), 1);

    // Stage two alone, continuing from the saved stage-one model.
    let out2 = tmp.path().join("s2");
    let m1 = out.join("m1.ckpt");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out2), "--stage", "2", "--m1", s(&m1)]);
    assert!(out2.join("m2.ckpt").exists());
    assert!(!out2.join("m1.ckpt").exists());
}

#[test]
fn full_run_metrics_schema_replay_and_idempotence() {
    let (tmp, cfg, data) = setup();
    let out = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    let m = metrics(&out);
    for key in ["config", "reports", "table"] {
        assert!(m.get(key).is_some(), "metrics JSON lacks {key}");
    }
    let reports = m["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 2);
    let stage2 = &reports[1][1];
    assert_eq!(stage2["epochs"].as_array().unwrap().len(), 3);
    assert_eq!(stage2["beta_trajectory"].as_array().unwrap().len(), 3);
    // 2 stages x (overall + 3 groups)
    assert_eq!(m["table"].as_array().unwrap().len(), 8);
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
    let echoed: RunConfig =
        RunConfig::from_json(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed, small_config());

    // Evaluating the saved stage-two model reproduces the run's final accuracies.
    let ev = tmp.path().join("eval");
    let m2 = out.join("m2.ckpt");
    ok(&["eval", "--config", s(&cfg), "--checkpoint", s(&m2), "--data", s(&data), "--out", s(&ev)]);
    assert_eq!(metrics(&ev)["reports"][0][1]["accuracy"], stage2["accuracy"]);

    // Rerunning overwrites with identical bytes.
    let before: Vec<Vec<u8>> = ["metrics.json", "metrics.csv", "m1.ckpt", "m2.ckpt", "config.json"]
        .iter()
        .map(|f| fs::read(out.join(f)).unwrap())
        .collect();
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    for (i, f) in ["metrics.json", "metrics.csv", "m1.ckpt", "m2.ckpt", "config.json"].iter().enumerate() {
        assert_eq!(fs::read(out.join(f)).unwrap(), before[i], "{f} changed on rerun");
    }
}

#[test]
fn flags_off_match_the_baseline_preset() {
    let (tmp, _, data) = setup();
    let with_scaling_off = RunConfig {
        learnable_scaling: false,
        ..small_config()
    };
    let flags_cfg = write_config(tmp.path(), "flags.json", &with_scaling_off);
    let baseline = shrink(RunConfig::baseline());
    let base_cfg = write_config(tmp.path(), "baseline.json", &baseline);

    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["train", "--config", s(&flags_cfg), "--data", s(&data), "--out", s(&a), "--afg", "off", "--kd", "off", "--loss", "ce"]);
    ok(&["train", "--config", s(&base_cfg), "--data", s(&data), "--out", s(&b)]);
    assert_eq!(metrics(&a)["reports"], metrics(&b)["reports"]);
    assert_eq!(fs::read(a.join("m2.ckpt")).unwrap(), fs::read(b.join("m2.ckpt")).unwrap());
}

#[test]
fn probe_reports_every_group() {
    let (tmp, cfg, data) = setup();
    let out = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--stage", "1"]);
    let probe = tmp.path().join("probe");
    let m1 = out.join("m1.ckpt");
    ok(&["probe", "--config", s(&cfg), "--checkpoint", s(&m1), "--data", s(&data), "--out", s(&probe)]);
    let acc = &metrics(&probe)["reports"][0][1]["accuracy"];
    for g in ["many", "medium", "few"] {
        assert!(acc[g].is_number(), "group {g} missing: {acc}");
    }
}

#[test]
fn ablation_tables_have_expected_row_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.json", &small_config());
    for (axis, rows) in [("alpha_form", 6), ("components", 7), ("loss_choice", 6)] {
        let out = tmp.path().join(axis);
        ok(&["ablate", "--config", s(&cfg), "--axis", axis, "--out", s(&out), "--jobs", "2"]);
        let csv = fs::read_to_string(out.join(format!("ablation_{axis}.csv"))).unwrap();
        let lines: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(lines.len(), rows, "{axis}");
        let hashes: std::collections::BTreeSet<&str> =
            lines.iter().map(|l| l.split(',').nth(3).unwrap()).collect();
        assert_eq!(hashes.len(), 1, "cells of {axis} saw different data");
    }
}

#[test]
fn corrupted_checkpoint_exits_2_without_output() {
    let (tmp, cfg, data) = setup();
    let bad = tmp.path().join("bad.ckpt");
    fs::write(&bad, b"GLCK\x01\x00\x00\x00garbage").unwrap();
    let out = tmp.path().join("never");
    let res = glag(&["eval", "--config", s(&cfg), "--checkpoint", s(&bad), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn dimension_mismatch_exits_2() {
    let (tmp, cfg, data) = setup();
    let run = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--stage", "1"]);
    let wide = RunConfig {
        dim: 9,
        ..small_config()
    };
    let wide_cfg = write_config(tmp.path(), "wide.json", &wide);
    let wide_data = tmp.path().join("wide");
    ok(&["synth", "--config", s(&wide_cfg), "--out", s(&wide_data)]);
    let m1 = run.join("m1.ckpt");
    let res = glag(&["eval", "--config", s(&cfg), "--checkpoint", s(&m1), "--data", s(&wide_data), "--out", s(&tmp.path().join("e"))]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn malformed_config_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"stage1_epochz": 3}"#).unwrap();
    let res = glag(&["synth", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("stage1_epochz"));

    let res = glag(&["synth", "--out", s(&tmp.path().join("o")), "--beta-init", "2"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("beta_init"));
}

#[test]
fn divergence_exits_3() {
    let (tmp, _, data) = setup();
    let hot = RunConfig {
        lr: 1e12,
        ..small_config()
    };
    let cfg = write_config(tmp.path(), "hot.json", &hot);
    let res = glag(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
}
