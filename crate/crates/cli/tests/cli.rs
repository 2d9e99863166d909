use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mtf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtf")).args(args).output().expect("spawn mtf")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn assert_error(out: &Output, code: i32, kind: &str) {
    assert_eq!(out.status.code(), Some(code), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let last = stderr.lines().last().expect("error line");
    let v: Value = serde_json::from_str(last).expect("single-line JSON error");
    assert_eq!(v["error"], kind);
    assert_eq!(v["exit"], code);
}

const TINY: &[&str] = &["--c", "24", "--d", "4", "--epochs", "1"];

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("c.json");
    fs::write(&cfg, r#"{"train": {"batch_size": 16, "clip_stride": 2, "eval_stride": 2, "val_fraction": 0.2, "model": {"heads": 2}}}"#).unwrap();
    cfg
}

fn synth(dir: &Path, name: &str) -> std::path::PathBuf {
    let d = dir.join(name);
    let out = mtf(&["synth", "--views", "4", "--frames", "12", "--seqs", "6", "--seed", "7", "--noise-px", "3", "--out", path(&d)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    d
}

#[test]
fn synth_train_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "d");
    assert!(data.join("manifest.json").is_file());
    let cfg = tiny_config(tmp.path());
    let run = tmp.path().join("k");
    let mut args = vec!["train", "--data", path(&data), "--config", path(&cfg), "--out", path(&run), "--deterministic"];
    args.extend_from_slice(TINY);
    let out = mtf(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("checkpoint").join("manifest.json").is_file());
    let log = fs::read_to_string(run.join("log.csv")).unwrap();
    assert!(log.lines().count() >= 2, "{log}");

    let echo: Value = serde_json::from_str(&fs::read_to_string(run.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(echo["train"]["model"]["channels"], 24);
    assert_eq!(echo["train"]["batch_size"], 16);
    assert_eq!(echo["deterministic"], true);
    assert!(Path::new(echo["data"].as_str().unwrap()).is_absolute());

    let csv_path = tmp.path().join("eval.csv");
    let out = mtf(&["eval", "--ckpt", path(&run), "--data", path(&data), "--views", "1,2", "--t", "7", "--out", path(&csv_path)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "views,T=7");
    assert!(lines[1].starts_with("2,"));
    assert!(lines[1][2..].parse::<f64>().unwrap() > 0.0);
    assert_eq!(fs::read_to_string(&csv_path).unwrap(), stdout);
    assert!(tmp.path().join("eval.config.json").is_file());

    let out = mtf(&["eval", "--ckpt", path(&run.join("checkpoint")), "--data", path(&data), "--held-out"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().next(), Some("views,T=1,T=3,T=5,T=7"));
    assert_eq!(stdout.lines().count(), 5);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(tmp.path(), "a");
    let b = synth(tmp.path(), "b");
    for f in ["manifest.json", "poses2d.f32le", "conf.f32le", "poses3d.f32le"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let cfg = tiny_config(tmp.path());
    let runs = [tmp.path().join("r1"), tmp.path().join("r2")];
    for r in &runs {
        let mut args = vec!["train", "--data", path(&a), "--config", path(&cfg), "--out", path(r), "--deterministic", "--seed", "3"];
        args.extend_from_slice(TINY);
        assert!(mtf(&args).status.success());
    }
    for f in ["checkpoint/manifest.json", "checkpoint/tensors.bin", "log.csv"] {
        assert_eq!(fs::read(runs[0].join(f)).unwrap(), fs::read(runs[1].join(f)).unwrap(), "{f}");
    }
}

#[test]
fn gradcheck_passes_on_small_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.json");
    fs::write(&cfg, r#"{"gradcheck": {"model": {"channels": 24, "groups": 4, "heads": 2}, "check": {"entries_per_tensor": 3}}}"#).unwrap();
    let out = mtf(&["gradcheck", "--config", path(&cfg), "--out", path(tmp.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let summary: Value = serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    assert!(summary["worst_rel_err"].as_f64().unwrap() < 1e-4);
    assert_eq!(summary["passed"], true);
    assert!(stdout.lines().any(|l| l.starts_with("model worst")));
    assert!(tmp.path().join("gradcheck.json").is_file());
}

#[test]
fn malformed_configs_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{\"train\": {\"epochs\": 2,}}").unwrap();
    assert_error(&mtf(&["gradcheck", "--config", path(&bad)]), 2, "config");
    fs::write(&bad, r#"{"train": {"epoch": 2}}"#).unwrap();
    assert_error(&mtf(&["gradcheck", "--config", path(&bad)]), 2, "config");
    assert_error(&mtf(&["train", "--data", "x", "--out", "y", "--c", "30", "--d", "4", "--k", "5"]), 2, "config");
    assert_error(&mtf(&["train", "--data", "x", "--out", "y", "--mask-rate", "2"]), 2, "config");
    assert_error(&mtf(&["frobnicate"]), 2, "config");
    assert_error(&mtf(&["synth", "--seqs", "many"]), 2, "config");
    assert_error(&mtf(&["synth", "--seqs", "3"]), 2, "config");
}

#[test]
fn missing_files_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let nowhere = tmp.path().join("nowhere");
    assert_error(&mtf(&["gradcheck", "--config", path(&nowhere.join("c.json"))]), 3, "missing");
    assert_error(&mtf(&["train", "--data", path(&nowhere), "--out", path(&tmp.path().join("o"))]), 3, "missing");
    let data = synth(tmp.path(), "d");
    assert_error(&mtf(&["eval", "--ckpt", path(&nowhere), "--data", path(&data)]), 3, "missing");
    fs::write(data.join("conf.f32le"), b"truncated").unwrap();
    assert_error(&mtf(&["train", "--data", path(&data), "--out", path(&tmp.path().join("o"))]), 3, "missing");
}

#[test]
fn divergence_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "d");
    let cfg = tmp.path().join("hot.json");
    fs::write(&cfg, r#"{"train": {"lr": 1e36, "lr_decay": 1.0, "epochs": 3, "batch_size": 8, "model": {"channels": 24, "groups": 4, "heads": 2}}}"#).unwrap();
    assert_error(&mtf(&["train", "--data", path(&data), "--config", path(&cfg), "--out", path(&tmp.path().join("o"))]), 4, "numeric");
}

#[test]
fn eval_rejects_bad_view_lists() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "d");
    let cfg = tiny_config(tmp.path());
    let run = tmp.path().join("k");
    let mut args = vec!["train", "--data", path(&data), "--config", path(&cfg), "--out", path(&run)];
    args.extend_from_slice(TINY);
    assert!(mtf(&args).status.success());
    for views in ["4", "1,1", "0,9"] {
        assert_error(&mtf(&["eval", "--ckpt", path(&run), "--data", path(&data), "--views", views]), 2, "config");
    }
    assert_error(&mtf(&["eval", "--ckpt", path(&run), "--data", path(&data), "--t", "4"]), 2, "config");
    assert_error(&mtf(&["eval", "--ckpt", path(&run), "--data", path(&data), "--mask-rate", "1.5"]), 2, "config");

    let row = |extra: &[&str]| {
        let mut args = vec!["eval", "--ckpt", path(&run), "--data", path(&data), "--views", "0,1,2", "--t", "3"];
        args.extend_from_slice(extra);
        let out = mtf(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let fused = row(&[]);
    assert_eq!(row(&["--mask-rate", "0"]), fused);
    let masked = row(&["--mask-rate", "1"]);
    assert_ne!(masked, fused);
    assert_eq!(row(&["--mask-rate", "1", "--seed", "8"]), masked);
}

#[test]
fn ablation_report_lists_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "d");
    let cfg = tiny_config(tmp.path());
    let out_dir = tmp.path().join("ab");
    let mut args = vec![
        "ablate", "--data", path(&data), "--config", path(&cfg), "--out", path(&out_dir), "--variants", "caa,without_fusion", "--seeds", "0,1",
    ];
    args.extend_from_slice(TINY);
    let out = mtf(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    let variants = report["variants"].as_array().unwrap();
    assert_eq!(variants.len(), 2);
    assert_eq!(variants[0]["variant"], "caa");
    assert_eq!(variants[0]["runs"].as_array().unwrap().len(), 2);
    let caa = variants[0]["params"]["total"].as_u64().unwrap();
    let bare = variants[1]["params"]["total"].as_u64().unwrap();
    assert!(bare < caa);
    assert_eq!(variants[1]["params"]["mft"], 0);
    let rows = variants[1]["mean"]["mpjpe"].as_array().unwrap();
    let first = rows[0][0].as_f64().unwrap();
    for row in rows {
        assert!((row[0].as_f64().unwrap() - first).abs() < 1e-6 * first);
    }
    assert!(out_dir.join("caa/seed1/checkpoint/manifest.json").is_file());
    assert!(fs::read_to_string(out_dir.join("report.txt")).unwrap().contains("# without_fusion"));
    assert_error(&mtf(&["ablate", "--data", path(&data), "--out", path(&out_dir), "--variants", "magic"]), 2, "config");
}

#[test]
fn help_exits_cleanly() {
    let out = mtf(&["--help"]);
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("gradcheck"));
}
