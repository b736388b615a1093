use std::path::Path;
use std::process::{Command, Output};

fn wish(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wish"))
        .args(args)
        .output()
        .expect("run wish binary")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_dataset(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let cfg = dir.join("synth.json");
    std::fs::write(&cfg, r#"{"num_samples": 60, "dim": 8}"#).unwrap();
    let data = dir.join("data");
    let out = wish(&["synth", "--quiet", "--config", p(&cfg), "--out", p(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    (data.join("train.jsonl"), data.join("eval.jsonl"))
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (train, eval) = small_dataset(dir.path());
    assert_eq!(std::fs::read_to_string(&train).unwrap().lines().count(), 48);
    assert_eq!(std::fs::read_to_string(&eval).unwrap().lines().count(), 12);

    let train_cfg = dir.path().join("train.json");
    std::fs::write(&train_cfg, r#"{"epochs": 2, "batch_size": 16}"#).unwrap();
    let ckpt = dir.path().join("model.json");
    let log = dir.path().join("log.jsonl");
    let labels = dir.path().join("labels.jsonl");
    let out = wish(&[
        "train", "--quiet", "--config", p(&train_cfg), "--data", p(&train), "--out", p(&ckpt),
        "--log", p(&log), "--dump-labels", p(&labels),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 2);
    assert!(std::fs::read_to_string(&labels).unwrap().lines().count() > 0);

    let preds = dir.path().join("preds.jsonl");
    let out = wish(&["predict", "--quiet", "--checkpoint", p(&ckpt), "--data", p(&eval), "--out", p(&preds)]);
    assert_eq!(code(&out), 0);
    let report = dir.path().join("report.json");
    let out = wish(&["eval", "--predictions", p(&preds), "--gt", p(&eval), "--out", p(&report)]);
    assert_eq!(code(&out), 0);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("either") && table.contains("mean-lrb"), "{table}");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["images"], 12);
    assert!(json["iou_either"].as_f64().unwrap() > 0.5);

    let base = dir.path().join("baseline.jsonl");
    let out = wish(&["baseline", "--quiet", "--data", p(&eval), "--out", p(&base)]);
    assert_eq!(code(&out), 0);
    let out = wish(&["eval", "--quiet", "--predictions", p(&base), "--gt", p(&eval)]);
    assert_eq!(code(&out), 0);
}

#[test]
fn seed_flag_controls_generation() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |name: &str, seed: &str| {
        let out_dir = dir.path().join(name);
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"num_samples": 10, "dim": 4}"#).unwrap();
        let out = wish(&["synth", "--quiet", "--config", p(&cfg), "--seed", seed, "--out", p(&out_dir)]);
        assert_eq!(code(&out), 0);
        std::fs::read(out_dir.join("train.jsonl")).unwrap()
    };
    assert_eq!(gen("a", "4"), gen("b", "4"));
    assert_ne!(gen("a", "4"), gen("c", "5"));
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let (train, eval) = small_dataset(dir.path());

    let bad_cfg = dir.path().join("bad.json");
    std::fs::write(&bad_cfg, r#"{"gamma": 1.5}"#).unwrap();
    assert_eq!(code(&wish(&["train", "--quiet", "--config", p(&bad_cfg), "--data", p(&train)])), 1);
    std::fs::write(&bad_cfg, r#"{"nonsense": 1}"#).unwrap();
    assert_eq!(code(&wish(&["train", "--quiet", "--config", p(&bad_cfg), "--data", p(&train)])), 1);
    std::fs::write(&bad_cfg, r#"{"width": 4}"#).unwrap();
    assert_eq!(code(&wish(&["synth", "--quiet", "--config", p(&bad_cfg), "--out", p(dir.path())])), 1);

    let broken = dir.path().join("broken.jsonl");
    let mut text = std::fs::read_to_string(&eval).unwrap();
    text.push_str("{\"id\": \"x\"}\n");
    std::fs::write(&broken, text).unwrap();
    let out = wish(&["baseline", "--data", p(&broken)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 13"));

    let ckpt = dir.path().join("corrupt.json");
    std::fs::write(&ckpt, "{\"version\": 1, \"dims\": ").unwrap();
    assert_eq!(code(&wish(&["predict", "--quiet", "--checkpoint", p(&ckpt), "--data", p(&eval)])), 1);

    assert_eq!(code(&wish(&["train"])), 1);
    assert_eq!(code(&wish(&["frobnicate"])), 1);
    assert_eq!(code(&wish(&["--help"])), 0);
}

#[test]
fn mismatched_ids_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (train, eval) = small_dataset(dir.path());
    let preds = dir.path().join("preds.jsonl");
    assert_eq!(code(&wish(&["baseline", "--quiet", "--data", p(&train), "--out", p(&preds)])), 0);
    let out = wish(&["eval", "--quiet", "--predictions", p(&preds), "--gt", p(&eval)]);
    assert_eq!(code(&out), 1);
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    assert_eq!(code(&wish(&["baseline", "--quiet", "--data", p(&missing)])), 2);
}

#[test]
fn gradcheck_passes() {
    let out = wish(&["gradcheck", "--seeds", "3"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("all gradients match"));
}
