//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wish_core::alignment::nce_loss;
use wish_core::data::{
    decode_rle, encode_rle, read_bundles_file, write_bundles_file, RleMask,
};
use wish_core::heads::{focal_term, masked_softmax, matching_loss};
use wish_core::inference::{
    evaluate, load_predictions, matching_accuracy, predict, MaskClass, Prediction,
};
use wish_core::numerics::{Matrix, Vecf};
use wish_core::synthgen::{nearest_neighbor_accuracy, split_scenes, SynthConfig};
use wish_core::trainer::{compute_pseudo_labels, BatchItem, SampleGeometry};
use wish_core::{train, GroundTruth, ModelState, SampleBundle, TrainConfig};

type Outcome = Result<String, String>;

fn wish(args: &[&str]) -> (i32, String, Duration) {
    let started = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_wish"))
        .args(args)
        .output()
        .expect("run wish binary");
    let elapsed = started.elapsed();
    let text = format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    (out.status.code().unwrap_or(-1), text, elapsed)
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn gradient_suite(dir: &Path) -> Outcome {
    let report = dir.join("gradcheck.json");
    let (code, text, elapsed) = wish(&["gradcheck", "--quiet", "--out", p(&report)]);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let suites = json["suites"].as_array().cloned().unwrap_or_default();
    let names: Vec<&str> = suites.iter().filter_map(|s| s["name"].as_str()).collect();
    let worst = suites
        .iter()
        .filter_map(|s| s["max_rel_error"].as_f64())
        .fold(0.0, f64::max);
    let all_seeds = suites.iter().all(|s| s["seeds"] == 10);
    let covered = [
        "adapter",
        "nce_scores",
        "nce_embeddings",
        "focal_theta0",
        "focal_theta2",
        "matching",
        "total_all_adapters",
    ]
    .iter()
    .all(|n| names.contains(n));
    check(
        code == 0 && covered && all_seeds && worst <= 1e-4 && elapsed < Duration::from_secs(30),
        format!(
            "exit {code}, {} suites x 10 seeds, max rel err {worst:.2e}, {:.2}s{}",
            suites.len(),
            elapsed.as_secs_f64(),
            if code == 0 { String::new() } else { format!("\n{text}") }
        ),
    )
}

fn loss_identities() -> Outcome {
    let single = nce_loss(&Matrix::from_rows(1, 1, vec![0.3]).unwrap(), 0.07).unwrap().0;
    let eye = nce_loss(&Matrix::from_rows(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(), 1.0)
        .unwrap()
        .0;
    let focal = focal_term(0.5, 2.0);
    let mut worst_match: f64 = 0.0;
    for n in 1..=8 {
        let probs = masked_softmax(&vec![0.37; n], &vec![true; n]).unwrap().unwrap();
        let probs: Vec<[f64; 2]> = probs.iter().map(|p| [*p, 0.0]).collect();
        let valid = vec![[true, false]; n];
        let l = matching_loss(&probs, &valid, [Some(n / 2), None]).unwrap().sum;
        worst_match = worst_match.max((l - (n as f64).ln()).abs());
    }
    let focal_err = (focal - 0.25 * std::f64::consts::LN_2).abs();
    check(
        single == 0.0 && (eye - 0.62652).abs() <= 1e-5 && focal_err <= 1e-9 && worst_match <= 1e-9,
        format!(
            "B=1 nce {single}, identity nce {eye:.6}, focal err {focal_err:.1e}, ln N err {worst_match:.1e}"
        ),
    )
}

fn dense_random(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    match rng.random_range(0..5) {
        0 => vec![false; n],
        1 => vec![true; n],
        _ => {
            let p = rng.random_range(0.02..0.98);
            (0..n).map(|_| rng.random_bool(p)).collect()
        }
    }
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut expected = [(0u64, 0u64); 4];
    for i in 0..500 {
        let (w, h) = (rng.random_range(1..=64u32), rng.random_range(1..=64u32));
        let n = (w * h) as usize;
        let pm: Vec<Vec<bool>> = (0..3).map(|_| dense_random(&mut rng, n)).collect();
        let gm: Vec<Vec<bool>> = (0..3).map(|_| dense_random(&mut rng, n)).collect();
        let keep: Vec<bool> = (0..6).map(|_| rng.random_bool(0.7)).collect();
        let opt = |m: &Vec<bool>, k: bool| -> Option<RleMask> {
            k.then(|| encode_rle(m, w, h).unwrap())
        };
        let id = format!("m{i}");
        preds.push(Prediction {
            id: id.clone(),
            width: w,
            height: h,
            left: opt(&pm[0], keep[0]),
            right: opt(&pm[1], keep[1]),
            both: opt(&pm[2], keep[2]),
            selected: [None, None],
            contact_prob: [None, None],
            hands_detected: 0,
        });
        gts.push(SampleBundle {
            id,
            width: w,
            height: h,
            narration: String::new(),
            objects: Vec::new(),
            hands: [None, None],
            phrases: Vec::new(),
            gt: Some(GroundTruth {
                left: opt(&gm[0], keep[3]),
                right: opt(&gm[1], keep[4]),
                both: opt(&gm[2], keep[5]),
            }),
        });
        for px in 0..n {
            let pv: Vec<bool> = (0..3).map(|c| keep[c] && pm[c][px]).collect();
            let gv: Vec<bool> = (0..3).map(|c| keep[3 + c] && gm[c][px]).collect();
            let classes = [
                (pv.iter().any(|v| *v), gv.iter().any(|v| *v)),
                (pv[0], gv[0]),
                (pv[1], gv[1]),
                (pv[2], gv[2]),
            ];
            for (e, (a, b)) in expected.iter_mut().zip(classes) {
                e.0 += u64::from(a && b);
                e.1 += u64::from(a || b);
            }
        }
    }
    let report = evaluate(&preds, &gts).map_err(|e| e.to_string())?;
    let mut metric_ok = true;
    for (k, class) in MaskClass::ALL.iter().enumerate() {
        let t = report.totals[k];
        let want = (expected[k].1 > 0).then(|| expected[k].0 as f64 / expected[k].1 as f64);
        metric_ok &= (t.intersection, t.union) == expected[k] && report.iou(*class) == want;
    }
    let mut rle_ok = 0;
    for _ in 0..1000 {
        let (w, h) = (rng.random_range(1..=64u32), rng.random_range(1..=64u32));
        let dense = dense_random(&mut rng, (w * h) as usize);
        let m = encode_rle(&dense, w, h).unwrap();
        if decode_rle(&m).unwrap() == dense {
            rle_ok += 1;
        }
    }
    check(
        metric_ok && rle_ok == 1000,
        format!(
            "E/L/R/B = {:.6}/{:.6}/{:.6}/{:.6} equal to dense oracle: {metric_ok}; RLE round-trips {rle_ok}/1000",
            report.iou_either.unwrap_or(f64::NAN),
            report.iou_left.unwrap_or(f64::NAN),
            report.iou_right.unwrap_or(f64::NAN),
            report.iou_both.unwrap_or(f64::NAN),
        ),
    )
}

struct Benchmark {
    dir: PathBuf,
    train: PathBuf,
    eval: PathBuf,
    checkpoint: PathBuf,
}

fn prepare_benchmark(dir: &Path) -> Result<Benchmark, String> {
    let data = dir.join("data");
    let (code, text, _) = wish(&["synth", "--quiet", "--seed", "0", "--out", p(&data)]);
    if code != 0 {
        return Err(format!("synth failed: {text}"));
    }
    Ok(Benchmark {
        dir: dir.to_path_buf(),
        train: data.join("train.jsonl"),
        eval: data.join("eval.jsonl"),
        checkpoint: dir.join("model.json"),
    })
}

fn synthetic_recovery(b: &Benchmark) -> Outcome {
    let (code, text, train_time) = wish(&[
        "train",
        "--quiet",
        "--data",
        p(&b.train),
        "--out",
        p(&b.checkpoint),
    ]);
    if code != 0 {
        return Err(format!("train exited {code}: {text}"));
    }
    let preds_path = b.dir.join("preds.jsonl");
    let (code, text, predict_time) = wish(&[
        "predict",
        "--quiet",
        "--checkpoint",
        p(&b.checkpoint),
        "--data",
        p(&b.eval),
        "--out",
        p(&preds_path),
    ]);
    if code != 0 {
        return Err(format!("predict exited {code}: {text}"));
    }
    let report_path = b.dir.join("report.json");
    let (code, text, _) = wish(&[
        "eval",
        "--quiet",
        "--predictions",
        p(&preds_path),
        "--gt",
        p(&b.eval),
        "--out",
        p(&report_path),
    ]);
    if code != 0 {
        return Err(format!("eval exited {code}: {text}"));
    }
    let train_set = read_bundles_file(&b.train).map_err(|e| e.to_string())?;
    let eval_set = read_bundles_file(&b.eval).map_err(|e| e.to_string())?;
    let preds = load_predictions(std::io::BufReader::new(
        std::fs::File::open(&preds_path).map_err(|e| e.to_string())?,
    ))
    .map_err(|e| e.to_string())?;
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(&report_path).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let acc = matching_accuracy(&preds, &eval_set).map_err(|e| e.to_string())?.unwrap_or(0.0);
    let e_iou = report["iou_either"].as_f64().unwrap_or(0.0);
    let nn = nearest_neighbor_accuracy(&eval_set).map_err(|e| e.to_string())?.unwrap_or(0.0);
    let elapsed = train_time + predict_time;
    check(
        train_set.len() == 2000
            && eval_set.len() == 500
            && acc >= 0.90
            && e_iou >= 0.80
            && nn >= 0.99
            && elapsed < Duration::from_secs(600),
        format!(
            "{}/{} scenes, matching acc {acc:.4}, E-IoU {e_iou:.4}, NN oracle {nn:.4}, train+predict {:.1}s",
            train_set.len(),
            eval_set.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn ablation_trend() -> Outcome {
    let configs = [("full", true, true, true), ("nce-only", true, false, false), ("heads-only", false, true, true)];
    let mut means = [0.0; 3];
    for seed in 0..3u64 {
        let (train_set, eval_set) = split_scenes(&SynthConfig {
            seed,
            ..SynthConfig::default()
        })
        .map_err(|e| e.to_string())?;
        for (slot, (_, nce, contact, matching)) in configs.iter().enumerate() {
            let cfg = TrainConfig {
                seed,
                enable_nce: *nce,
                enable_contact: *contact,
                enable_match: *matching,
                ..TrainConfig::default()
            };
            let (state, _) = train(&train_set, &cfg).map_err(|e| e.to_string())?;
            let preds = eval_set
                .iter()
                .map(|b| predict(&state, &b.visual()))
                .collect::<wish_core::Result<Vec<_>>>()
                .map_err(|e| e.to_string())?;
            let e = evaluate(&preds, &eval_set).map_err(|e| e.to_string())?;
            means[slot] += e.iou_either.unwrap_or(0.0) / 3.0;
        }
    }
    check(
        means[0] >= means[1] && means[0] >= means[2],
        format!(
            "mean E-IoU over 3 seeds: full {:.6}, nce-only {:.6}, heads-only {:.6}",
            means[0], means[1], means[2]
        ),
    )
}

fn stop_gradient(b: &Benchmark) -> Outcome {
    let bundles = read_bundles_file(&b.train).map_err(|e| e.to_string())?;
    let geometry: Vec<SampleGeometry> = bundles
        .iter()
        .map(|s| SampleGeometry::of(s).unwrap())
        .collect();
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut checks = 0;
    for (chunk_no, chunk) in bundles.chunks(cfg.batch_size).take(8).enumerate() {
        let start = chunk_no * cfg.batch_size;
        let batch: Vec<BatchItem<'_>> = chunk
            .iter()
            .zip(&geometry[start..start + chunk.len()])
            .map(|(bundle, geometry)| BatchItem { bundle, geometry })
            .collect();
        let state = ModelState::init(32, &TrainConfig { seed: chunk_no as u64, ..cfg.clone() })
            .map_err(|e| e.to_string())?;
        let (_, labels, _) = compute_pseudo_labels(&state, &batch, cfg.gamma).unwrap();
        for _ in 0..5 {
            let mut probe = state.clone();
            for adapter in [&mut probe.adapters.contact, &mut probe.adapters.matching] {
                for t in adapter.tensors_mut() {
                    for v in t.iter_mut() {
                        *v += rng.random_range(-1.0..1.0);
                    }
                }
            }
            let (_, again, _) = compute_pseudo_labels(&probe, &batch, cfg.gamma).unwrap();
            if again != labels {
                return Err(format!("labels changed in batch {chunk_no}"));
            }
            checks += 1;
        }
    }
    Ok(format!("{checks} head perturbations over 8 batches, L and H unchanged"))
}

fn narration_free(b: &Benchmark) -> Outcome {
    let mut bundles = read_bundles_file(&b.eval).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for s in &mut bundles {
        s.narration = "unrelated words".into();
        for ph in &mut s.phrases {
            let noise = |rng: &mut ChaCha8Rng| {
                Vecf::new((0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
            };
            ph.text = "noise".into();
            ph.emb_left = noise(&mut rng);
            ph.emb_right = noise(&mut rng);
        }
    }
    let corrupted = b.dir.join("eval_corrupted.jsonl");
    write_bundles_file(&corrupted, &bundles).map_err(|e| e.to_string())?;
    let run = |data: &Path, out: &Path| {
        wish(&["predict", "--quiet", "--checkpoint", p(&b.checkpoint), "--data", p(data), "--out", p(out)])
    };
    let clean_out = b.dir.join("preds_clean.jsonl");
    let dirty_out = b.dir.join("preds_corrupted.jsonl");
    let (c1, t1, _) = run(&b.eval, &clean_out);
    let (c2, t2, _) = run(&corrupted, &dirty_out);
    if c1 != 0 || c2 != 0 {
        return Err(format!("predict failed: {t1}{t2}"));
    }
    let clean = std::fs::read(&clean_out).map_err(|e| e.to_string())?;
    let dirty = std::fs::read(&dirty_out).map_err(|e| e.to_string())?;
    check(
        clean == dirty && !clean.is_empty(),
        format!("{} bytes of predictions, identical: {}", clean.len(), clean == dirty),
    )
}

fn determinism(b: &Benchmark) -> Outcome {
    let a = b.dir.join("det_a.json");
    let c = b.dir.join("det_b.json");
    for out in [&a, &c] {
        let (code, text, _) = wish(&["train", "--quiet", "--seed", "3", "--data", p(&b.train), "--out", p(out)]);
        if code != 0 {
            return Err(format!("train exited {code}: {text}"));
        }
    }
    let x = std::fs::read(&a).map_err(|e| e.to_string())?;
    let y = std::fs::read(&c).map_err(|e| e.to_string())?;
    check(
        x == y,
        format!("two runs, seed 3: {} byte checkpoints, identical: {}", x.len(), x == y),
    )
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let bench = prepare_benchmark(dir.path());
    let needs_bench = |f: fn(&Benchmark) -> Outcome| {
        let bench = &bench;
        move || match bench {
            Ok(b) => f(b),
            Err(e) => Err(e.clone()),
        }
    };
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("gradient suite", Box::new(|| gradient_suite(dir.path()))),
        ("loss identities", Box::new(loss_identities)),
        ("metric oracle", Box::new(metric_oracle)),
        ("synthetic end-to-end recovery", Box::new(needs_bench(synthetic_recovery))),
        ("ablation trend", Box::new(ablation_trend)),
        ("pseudo-label stop-gradient", Box::new(needs_bench(stop_gradient))),
        ("narration-free inference", Box::new(needs_bench(narration_free))),
        ("determinism", Box::new(needs_bench(determinism))),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<30} ({secs:.1}s) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<30} ({secs:.1}s) {detail}");
            }
        }
    }
    println!(
        "acceptance: {}/{} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
