use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "data": {"kind": "synthetic", "num_langs": 3, "utts_per_lang": 8, "duration_s": 1.0, "seed": 2, "train_frac": 0.75},
  "features": {"crop_s": 0.8},
  "encoder": {"num_layers": 1, "dim": 16, "num_heads": 2, "tap_layer": 1},
  "quantizer": {"codebook_size": 16},
  "train": {"total_steps": 6, "warmup_steps": 2, "batch_size": 4},
  "sweep": {"spans_ms": [0, 80], "seeds": [0]}
}"#;

fn contextlid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_contextlid"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn tiny_with(dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v: Value = serde_json::from_str(TINY).unwrap();
    edit(&mut v);
    write_config(dir, "run.json", &v.to_string())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr_json(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

fn log_records(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gradcheck_on_default_config_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", "{}");
    let out = contextlid(&["gradcheck", "--config", s(&cfg)]);
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    let first = text.lines().next().unwrap();
    assert!(first.starts_with("PASS max_rel_err="), "{first}");
    let err: f64 = first["PASS max_rel_err=".len()..]
        .split_whitespace()
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!(err < 1e-4);
}

#[test]
fn unknown_keys_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"trian": {}, "train": {"lamda": 0.1}}"#);
    let out = contextlid(&["gradcheck", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "usage");
    let msg = err["message"].as_str().unwrap();
    assert!(msg.contains("trian") && msg.contains("train.lamda"), "{msg}");
}

#[test]
fn bad_invocations_exit_with_usage_code() {
    assert_eq!(contextlid(&[]).status.code(), Some(1));
    assert_eq!(contextlid(&["train", "--config"]).status.code(), Some(1));
    assert_eq!(contextlid(&["--help"]).status.code(), Some(0));
    let missing = contextlid(&["gradcheck", "--config", "/nonexistent/c.json"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", TINY);
    let out = contextlid(&["quantize", "--config", s(&cfg), "--audio", "/nonexistent/a.wav"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "runtime");
}

#[test]
fn train_is_reproducible_and_eval_matches_validation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = contextlid(&["train", "--config", s(&cfg), "--out", s(out)]);
        assert!(o.status.success(), "{o:?}");
    }
    let ck = |d: &Path| std::fs::read(d.join("model.ckpt")).unwrap();
    assert_eq!(ck(&a), ck(&b));

    let strip = |d: &Path| {
        let mut recs = log_records(&d.join("train_log.jsonl"));
        for r in &mut recs {
            r.as_object_mut().unwrap().remove("elapsed_ms");
        }
        recs
    };
    let log = strip(&a);
    assert_eq!(log, strip(&b));
    assert_eq!(log.len(), 7);
    assert!(log[0]["config"].is_object());
    assert!(log[1..].iter().all(|r| r["loss_u"].is_number()));

    let report = dir.path().join("eval.json");
    let o = contextlid(&["eval", "--config", s(&cfg), "--checkpoint", s(&a.join("model.ckpt")), "--report", s(&report)]);
    assert!(o.status.success(), "{o:?}");
    let read = |p: PathBuf| -> Value { serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap() };
    let validation = read(a.join("validation.json"));
    let evaluated = read(report);
    assert_eq!(validation["report"], evaluated["report"]);
    assert_eq!(validation["config"], evaluated["config"]);
}

#[test]
fn supervised_only_training_logs_no_unsupervised_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_with(dir.path(), |v| {
        v["train"]["lambda"] = 0.0.into();
        v["mask"] = serde_json::json!({"span_ms": 0});
    });
    let out = dir.path().join("run");
    let o = contextlid(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{o:?}");
    let recs = log_records(&out.join("train_log.jsonl"));
    for r in &recs[1..] {
        assert!(r.get("loss_u").is_none(), "{r}");
        assert_eq!(r["masked"], 0);
    }
}

#[test]
fn joint_training_without_masking_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_with(dir.path(), |v| v["mask"] = serde_json::json!({"span_ms": 0}));
    let o = contextlid(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["config_error"], true);
}

#[test]
fn sweep_writes_one_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", TINY);
    let csv = dir.path().join("sweep.csv");
    let o = contextlid(&["sweep", "--config", s(&cfg), "--out", s(&csv)]);
    assert!(o.status.success(), "{o:?}");
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# config: {"));
    assert_eq!(lines[1], "mode,span_ms,seed,error_rate,pseudo_label_acc");
    let modes: Vec<&str> = lines[2..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(modes, ["supervised", "supervised", "joint"]);
    assert!(lines[4].split(',').nth(4).unwrap().parse::<f64>().is_ok());
}

#[test]
fn synth_then_train_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", TINY);
    let corpus = dir.path().join("corpus");
    let o = contextlid(&["synth", "--config", s(&cfg), "--out", s(&corpus)]);
    assert!(o.status.success(), "{o:?}");
    let wavs = std::fs::read_dir(corpus.join("wav")).unwrap().count();
    assert_eq!(wavs, 24);

    let manifest_cfg = tiny_with(dir.path(), |v| {
        v["data"] = serde_json::json!({"kind": "manifest", "path": "corpus/manifest.jsonl", "train_frac": 0.75});
    });
    let o = contextlid(&["train", "--config", s(&manifest_cfg), "--out", s(&dir.path().join("m"))]);
    assert!(o.status.success(), "{o:?}");

    let wav = std::fs::read_dir(corpus.join("wav")).unwrap().next().unwrap().unwrap().path();
    let o = contextlid(&["quantize", "--config", s(&cfg), "--audio", s(&wav)]);
    assert!(o.status.success(), "{o:?}");
    let dump: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let frames = dump["frames"].as_u64().unwrap() as usize;
    let labels = dump["labels"].as_array().unwrap();
    assert_eq!(labels.len(), frames.div_ceil(4));
    assert!(labels.iter().all(|l| l.as_u64().unwrap() < 16));
    assert!(dump["config"].is_object());
}
