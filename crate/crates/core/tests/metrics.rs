//! Dataset-level IoU against a dense pixel-by-pixel reimplementation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wish_core::data::{decode_rle, encode_rle};
use wish_core::inference::{evaluate, MaskClass, Prediction};
use wish_core::{GroundTruth, RleMask, SampleBundle};

type Dense = Vec<bool>;

fn random_dense(rng: &mut ChaCha8Rng, n: usize) -> Option<Dense> {
    match rng.random_range(0..4) {
        0 => None,
        1 => Some(vec![rng.random_bool(0.5); n]),
        _ => {
            let p = rng.random_range(0.05..0.95);
            Some((0..n).map(|_| rng.random_bool(p)).collect())
        }
    }
}

struct Pair {
    w: u32,
    h: u32,
    pred: [Option<Dense>; 3],
    gt: [Option<Dense>; 3],
}

fn random_pair(rng: &mut ChaCha8Rng) -> Pair {
    let w = rng.random_range(1..=64);
    let h = rng.random_range(1..=64);
    let n = (w * h) as usize;
    Pair {
        w,
        h,
        pred: [random_dense(rng, n), random_dense(rng, n), random_dense(rng, n)],
        gt: [random_dense(rng, n), random_dense(rng, n), random_dense(rng, n)],
    }
}

fn rle(m: &Option<Dense>, w: u32, h: u32) -> Option<RleMask> {
    m.as_ref().map(|d| encode_rle(d, w, h).unwrap())
}

/// Intersection and union per class in E, L, R, B order.
fn dense_counts(p: &Pair) -> [(u64, u64); 4] {
    let n = (p.w * p.h) as usize;
    let get = |m: &Option<Dense>, i: usize| m.as_ref().is_some_and(|d| d[i]);
    let mut out = [(0u64, 0u64); 4];
    for i in 0..n {
        let pv = [get(&p.pred[0], i), get(&p.pred[1], i), get(&p.pred[2], i)];
        let gv = [get(&p.gt[0], i), get(&p.gt[1], i), get(&p.gt[2], i)];
        let classes = [
            (pv.iter().any(|v| *v), gv.iter().any(|v| *v)),
            (pv[0], gv[0]),
            (pv[1], gv[1]),
            (pv[2], gv[2]),
        ];
        for (slot, (a, b)) in out.iter_mut().zip(classes) {
            slot.0 += u64::from(a && b);
            slot.1 += u64::from(a || b);
        }
    }
    out
}

#[test]
fn dataset_iou_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for round in 0..10 {
        let pairs: Vec<Pair> = (0..50).map(|_| random_pair(&mut rng)).collect();
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        let mut expected = [(0u64, 0u64); 4];
        for (i, p) in pairs.iter().enumerate() {
            let id = format!("r{round}-{i}");
            preds.push(Prediction {
                id: id.clone(),
                width: p.w,
                height: p.h,
                left: rle(&p.pred[0], p.w, p.h),
                right: rle(&p.pred[1], p.w, p.h),
                both: rle(&p.pred[2], p.w, p.h),
                selected: [None, None],
                contact_prob: [None, None],
                hands_detected: 0,
            });
            gts.push(SampleBundle {
                id,
                width: p.w,
                height: p.h,
                narration: String::new(),
                objects: Vec::new(),
                hands: [None, None],
                phrases: Vec::new(),
                gt: Some(GroundTruth {
                    left: rle(&p.gt[0], p.w, p.h),
                    right: rle(&p.gt[1], p.w, p.h),
                    both: rle(&p.gt[2], p.w, p.h),
                }),
            });
            for (e, c) in expected.iter_mut().zip(dense_counts(p)) {
                e.0 += c.0;
                e.1 += c.1;
            }
        }
        let report = evaluate(&preds, &gts).unwrap();
        for (k, class) in MaskClass::ALL.iter().enumerate() {
            let t = report.totals[k];
            assert_eq!((t.intersection, t.union), expected[k], "{class:?}");
            let iou = (expected[k].1 > 0).then(|| expected[k].0 as f64 / expected[k].1 as f64);
            assert_eq!(report.iou(*class), iou);
        }
    }
}

#[test]
fn rle_round_trip_on_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let w = rng.random_range(1..=64);
        let h = rng.random_range(1..=64);
        let dense = random_dense(&mut rng, (w * h) as usize).unwrap_or_default();
        let dense = if dense.is_empty() { vec![false; (w * h) as usize] } else { dense };
        let m = encode_rle(&dense, w, h).unwrap();
        assert_eq!(decode_rle(&m).unwrap(), dense);
        assert_eq!(m.area(), dense.iter().filter(|v| **v).count() as u64);
    }
}

#[test]
fn perfect_predictions_score_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = random_pair(&mut rng);
    let gt = GroundTruth {
        left: rle(&p.gt[0], p.w, p.h),
        right: rle(&p.gt[1], p.w, p.h),
        both: rle(&p.gt[2], p.w, p.h),
    };
    let pred = Prediction {
        id: "x".into(),
        width: p.w,
        height: p.h,
        left: gt.left.clone(),
        right: gt.right.clone(),
        both: gt.both.clone(),
        selected: [None, None],
        contact_prob: [None, None],
        hands_detected: 0,
    };
    let bundle = SampleBundle {
        id: "x".into(),
        width: p.w,
        height: p.h,
        narration: String::new(),
        objects: Vec::new(),
        hands: [None, None],
        phrases: Vec::new(),
        gt: Some(gt),
    };
    let r = evaluate(&[pred], &[bundle]).unwrap();
    for class in MaskClass::ALL {
        assert!(matches!(r.iou(class), Some(v) if v == 1.0) || r.iou(class).is_none());
    }
}

#[test]
fn synthetic_ground_truth_scores_one_against_itself() {
    let (_, eval) = wish_core::synthgen::split_scenes(&wish_core::SynthConfig {
        num_samples: 100,
        dim: 8,
        ..wish_core::SynthConfig::default()
    })
    .unwrap();
    let preds: Vec<Prediction> = eval
        .iter()
        .map(|b| {
            let gt = b.gt.clone().unwrap();
            Prediction {
                id: b.id.clone(),
                width: b.width,
                height: b.height,
                left: gt.left,
                right: gt.right,
                both: gt.both,
                selected: [None, None],
                contact_prob: [None, None],
                hands_detected: 0,
            }
        })
        .collect();
    let r = evaluate(&preds, &eval).unwrap();
    for class in MaskClass::ALL {
        assert_eq!(r.iou(class), Some(1.0), "{class:?}");
    }
}
