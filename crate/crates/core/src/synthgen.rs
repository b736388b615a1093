//! Synthetic scenes with planted hand-object-phrase associations.
//!
//! Every scene is drawn from its own RNG stream, so scene `i` is the same no
//! matter how many scenes are generated or in which order.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{
    mask_iou, rect_mask, write_bundles_file, GroundTruth, HandEntry, HandSide, ObjectProposal,
    PhraseEntry, RleMask, SampleBundle,
};
use crate::error::{Result, WishError};
use crate::inference::planted_target;
use crate::numerics::{argmax, dot, normalized, Vecf};

const MAX_LAYOUT_TRIES: usize = 200;

const NOUNS: [&str; 16] = [
    "knife", "plate", "cup", "spoon", "bowl", "pan", "lid", "sponge", "bottle", "jar",
    "board", "tap", "fork", "towel", "bag", "onion",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_samples: usize,
    pub train_fraction: f64,
    pub dim: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_phrases: usize,
    pub max_phrases: usize,
    /// Embedding noise scale: the perturbation added before normalizing has
    /// expected norm `noise`.
    pub noise: f64,
    pub width: u32,
    pub height: u32,
    /// Scene mix: left-only, right-only and both-hands-on-one-object. The
    /// remainder are bimanual scenes with a different object per hand.
    pub frac_left: f64,
    pub frac_right: f64,
    pub frac_both: f64,
    /// Chance that the free hand of a one-handed scene is visible anyway.
    pub p_idle_hand: f64,
    /// Chance that a non-target object overlaps a hand.
    pub p_distractor: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_samples: 2500,
            train_fraction: 0.8,
            dim: 32,
            min_objects: 3,
            max_objects: 6,
            min_phrases: 1,
            max_phrases: 3,
            noise: 0.05,
            width: 32,
            height: 32,
            frac_left: 0.3,
            frac_right: 0.3,
            frac_both: 0.2,
            p_idle_hand: 0.25,
            p_distractor: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(WishError::Config(m));
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad("noise must be finite and >= 0".into());
        }
        if self.dim < 2 {
            return bad("dim must be at least 2".into());
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad(format!(
                "object range {}..={} is empty or starts at 0",
                self.min_objects, self.max_objects
            ));
        }
        if self.max_objects < 2 {
            return bad("bimanual scenes need room for two objects".into());
        }
        if self.min_phrases == 0 || self.min_phrases > self.max_phrases {
            return bad(format!(
                "phrase range {}..={} is empty or starts at 0",
                self.min_phrases, self.max_phrases
            ));
        }
        if self.width < 8 || self.height < 8 {
            return bad(format!("grid {}x{} is smaller than 8x8", self.width, self.height));
        }
        for (name, p) in [
            ("frac_left", self.frac_left),
            ("frac_right", self.frac_right),
            ("frac_both", self.frac_both),
            ("p_idle_hand", self.p_idle_hand),
            ("p_distractor", self.p_distractor),
            ("train_fraction", self.train_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        if self.frac_left + self.frac_right + self.frac_both > 1.0 + 1e-12 {
            return bad("scene fractions sum past 1".into());
        }
        Ok(())
    }
}

/// Which hands hold what.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interaction {
    Left,
    Right,
    /// Both hands on the same object.
    Both,
    /// Each hand on its own object.
    Bimanual,
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

impl Rect {
    fn mask(&self, w: u32, h: u32) -> RleMask {
        rect_mask(w, h, self.x0, self.y0, self.x1, self.y1)
    }

    fn overlaps(&self, o: &Rect) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok((v, _)) = normalized(&g) {
            return v;
        }
    }
}

fn perturbed(rng: &mut ChaCha8Rng, base: &[f64], noise: f64) -> Vec<f64> {
    let scale = noise / (base.len() as f64).sqrt();
    loop {
        let v: Vec<f64> = base
            .iter()
            .map(|b| b + scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if let Ok((v, _)) = normalized(&v) {
            return v;
        }
    }
}

fn vecf(v: Vec<f64>) -> Vecf {
    Vecf::new(v).expect("generated embeddings are finite")
}

/// A rectangle of random size inside `[x_lo, x_hi) × [0, height)`.
fn rect_in(rng: &mut ChaCha8Rng, x_lo: u32, x_hi: u32, height: u32, min: u32, max: u32) -> Rect {
    let span = x_hi - x_lo;
    let w = rng.random_range(min.min(span)..=max.min(span));
    let h = rng.random_range(min.min(height)..=max.min(height));
    let x0 = rng.random_range(x_lo..=x_hi - w);
    let y0 = rng.random_range(0..=height - h);
    Rect {
        x0,
        y0,
        x1: x0 + w,
        y1: y0 + h,
    }
}

/// A rectangle of random size containing the pixel `(px, py)`.
fn rect_around(rng: &mut ChaCha8Rng, px: u32, py: u32, cfg: &SynthConfig, min: u32, max: u32) -> Rect {
    let w = rng.random_range(min..=max).min(cfg.width);
    let h = rng.random_range(min..=max).min(cfg.height);
    let x0 = rng.random_range(px.saturating_sub(w - 1)..=px.min(cfg.width - w));
    let y0 = rng.random_range(py.saturating_sub(h - 1)..=py.min(cfg.height - h));
    Rect {
        x0,
        y0,
        x1: x0 + w,
        y1: y0 + h,
    }
}

fn point_in(rng: &mut ChaCha8Rng, r: &Rect) -> (u32, u32) {
    (rng.random_range(r.x0..r.x1), rng.random_range(r.y0..r.y1))
}

fn draw_interaction(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Interaction {
    let u: f64 = rng.random();
    if u < cfg.frac_left {
        Interaction::Left
    } else if u < cfg.frac_left + cfg.frac_right {
        Interaction::Right
    } else if u < cfg.frac_left + cfg.frac_right + cfg.frac_both {
        Interaction::Both
    } else {
        Interaction::Bimanual
    }
}

struct Layout {
    hands: [Option<Rect>; 2],
    objects: Vec<Rect>,
}

/// Places hands and objects. `targets[k]` is the object index held by hand
/// `k`; every other object overlaps a hand only with probability
/// `p_distractor`.
fn layout(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    hands_present: [bool; 2],
    targets: [Option<usize>; 2],
    n_objects: usize,
) -> Option<Layout> {
    let (w, h) = (cfg.width, cfg.height);
    let half = w / 2;
    let hand_min = (w / 8).max(2);
    let hand_max = (w / 4).max(hand_min);
    let obj_min = (w / 10).max(2);
    let obj_max = (w / 3).max(obj_min);
    let hands = [
        hands_present[0].then(|| rect_in(rng, 0, half, h, hand_min, hand_max)),
        hands_present[1].then(|| rect_in(rng, half, w, h, hand_min, hand_max)),
    ];
    let mut objects: Vec<Option<Rect>> = vec![None; n_objects];
    for k in 0..2 {
        let Some(t) = targets[k] else { continue };
        if objects[t].is_some() {
            continue;
        }
        let hk = hands[k].expect("interacting hand is present");
        let rect = if targets[1 - k] == Some(t) {
            // One object spanning both hands.
            let hl = hands[0].expect("left hand");
            let hr = hands[1].expect("right hand");
            let x0 = rng.random_range(hl.x0..hl.x1);
            let x1 = rng.random_range(hr.x0..hr.x1) + 1;
            let y0 = hl.y0.min(hr.y0);
            let y1 = hl.y1.max(hr.y1);
            Rect { x0, y0, x1, y1 }
        } else {
            let (px, py) = point_in(rng, &hk);
            rect_around(rng, px, py, cfg, obj_min, obj_max)
        };
        objects[t] = Some(rect);
    }
    let all_hands: Vec<Rect> = hands.iter().flatten().copied().collect();
    for slot in objects.iter_mut().filter(|o| o.is_none()) {
        let wants_overlap = !all_hands.is_empty() && rng.random::<f64>() < cfg.p_distractor;
        let rect = if wants_overlap {
            let hk = all_hands[rng.random_range(0..all_hands.len())];
            let (px, py) = point_in(rng, &hk);
            rect_around(rng, px, py, cfg, obj_min, obj_max)
        } else {
            let mut placed = None;
            for _ in 0..MAX_LAYOUT_TRIES {
                let r = rect_in(rng, 0, w, h, obj_min, obj_max);
                if !all_hands.iter().any(|hr| hr.overlaps(&r)) {
                    placed = Some(r);
                    break;
                }
            }
            placed?
        };
        *slot = Some(rect);
    }
    let objects: Vec<Rect> = objects.into_iter().map(|o| o.expect("all placed")).collect();
    // Targets must be identifiable by mask and overlap their hands.
    for k in 0..2 {
        let Some(t) = targets[k] else { continue };
        let target = objects[t];
        if !hands[k].is_some_and(|hr| hr.overlaps(&target)) {
            return None;
        }
        let same = |r: &Rect| (r.x0, r.y0, r.x1, r.y1) == (target.x0, target.y0, target.x1, target.y1);
        if objects.iter().enumerate().any(|(i, r)| i != t && same(r)) {
            return None;
        }
    }
    Some(Layout { hands, objects })
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// One scene with ground truth.
pub fn generate_scene(cfg: &SynthConfig, index: usize) -> Result<SampleBundle> {
    cfg.validate()?;
    let mut rng = scene_rng(cfg.seed, index);
    let interaction = draw_interaction(&mut rng, cfg);
    let min_objects = match interaction {
        Interaction::Bimanual => cfg.min_objects.max(2),
        _ => cfg.min_objects,
    };
    let n_objects = rng.random_range(min_objects..=cfg.max_objects);
    let n_phrases = rng.random_range(cfg.min_phrases..=cfg.max_phrases);

    let pick_two = |rng: &mut ChaCha8Rng| {
        let a = rng.random_range(0..n_objects);
        let mut b = rng.random_range(0..n_objects - 1);
        if b >= a {
            b += 1;
        }
        (a, b)
    };
    let (targets, hands_present) = match interaction {
        Interaction::Left => {
            let t = rng.random_range(0..n_objects);
            ([Some(t), None], [true, rng.random::<f64>() < cfg.p_idle_hand])
        }
        Interaction::Right => {
            let t = rng.random_range(0..n_objects);
            ([None, Some(t)], [rng.random::<f64>() < cfg.p_idle_hand, true])
        }
        Interaction::Both => {
            let t = rng.random_range(0..n_objects);
            ([Some(t), Some(t)], [true, true])
        }
        Interaction::Bimanual => {
            let (a, b) = pick_two(&mut rng);
            ([Some(a), Some(b)], [true, true])
        }
    };

    let mut placed = None;
    for _ in 0..MAX_LAYOUT_TRIES {
        if let Some(l) = layout(&mut rng, cfg, hands_present, targets, n_objects) {
            placed = Some(l);
            break;
        }
    }
    let layout = placed.ok_or(WishError::Layout(index))?;
    let (w, h) = (cfg.width, cfg.height);

    let object_vecs: Vec<Vec<f64>> = (0..n_objects).map(|_| unit_vector(&mut rng, cfg.dim)).collect();
    let nouns: Vec<&str> = (0..n_objects)
        .map(|_| NOUNS[rng.random_range(0..NOUNS.len())])
        .collect();
    let objects: Vec<ObjectProposal> = layout
        .objects
        .iter()
        .zip(&object_vecs)
        .map(|(r, v)| ObjectProposal {
            mask: r.mask(w, h),
            embedding: vecf(v.clone()),
        })
        .collect();

    let mut hands: [Option<HandEntry>; 2] = [None, None];
    for side in HandSide::ALL {
        let k = side.index();
        let Some(r) = layout.hands[k] else { continue };
        let emb = match targets[k] {
            Some(t) => perturbed(&mut rng, &object_vecs[t], cfg.noise),
            None => unit_vector(&mut rng, cfg.dim),
        };
        hands[k] = Some(HandEntry {
            side,
            mask: r.mask(w, h),
            embedding: vecf(emb),
        });
    }

    // Each interacting hand gets one phrase slot whose hand-specific
    // embedding carries its target.
    let mut slot_of = [None, None];
    for k in 0..2 {
        if targets[k].is_some() {
            slot_of[k] = Some(rng.random_range(0..n_phrases));
        }
    }
    let mut phrases = Vec::with_capacity(n_phrases);
    for j in 0..n_phrases {
        let mut embs = [None, None];
        for (k, emb) in embs.iter_mut().enumerate() {
            *emb = Some(match (slot_of[k], targets[k]) {
                (Some(s), Some(t)) if s == j => perturbed(&mut rng, &object_vecs[t], cfg.noise),
                _ => unit_vector(&mut rng, cfg.dim),
            });
        }
        let text = (0..2)
            .find(|&k| slot_of[k] == Some(j))
            .and_then(|k| targets[k])
            .map_or_else(|| format!("thing {j}"), |t| nouns[t].to_string());
        let [l, r] = embs;
        phrases.push(PhraseEntry {
            text,
            emb_left: vecf(l.expect("set above")),
            emb_right: vecf(r.expect("set above")),
        });
    }

    let narration = match interaction {
        Interaction::Left => format!("pick up {} with left hand", nouns[targets[0].unwrap()]),
        Interaction::Right => format!("pick up {} with right hand", nouns[targets[1].unwrap()]),
        Interaction::Both => format!("lift {} with both hands", nouns[targets[0].unwrap()]),
        Interaction::Bimanual => format!(
            "hold {} and {}",
            nouns[targets[0].unwrap()],
            nouns[targets[1].unwrap()]
        ),
    };
    let mask_of = |t: Option<usize>| t.map(|t| objects[t].mask.clone());
    let gt = match interaction {
        Interaction::Both => GroundTruth {
            left: None,
            right: None,
            both: mask_of(targets[0]),
        },
        _ => GroundTruth {
            left: mask_of(targets[0]),
            right: mask_of(targets[1]),
            both: None,
        },
    };

    let bundle = SampleBundle {
        id: format!("synth-{:06}", index),
        width: w,
        height: h,
        narration,
        objects,
        hands,
        phrases,
        gt: Some(gt),
    };
    debug_assert!(bundle.validate().is_ok());
    Ok(bundle)
}

pub fn generate_scenes(cfg: &SynthConfig) -> Result<Vec<SampleBundle>> {
    cfg.validate()?;
    (0..cfg.num_samples).map(|i| generate_scene(cfg, i)).collect()
}

/// Train scenes first, then eval scenes; the split is by index.
pub fn split_scenes(cfg: &SynthConfig) -> Result<(Vec<SampleBundle>, Vec<SampleBundle>)> {
    let mut all = generate_scenes(cfg)?;
    let n_train = (cfg.num_samples as f64 * cfg.train_fraction).round() as usize;
    let eval = all.split_off(n_train.min(all.len()));
    Ok((all, eval))
}

/// Writes `train.jsonl` and `eval.jsonl` into `dir`; returns their paths.
pub fn generate_dataset(cfg: &SynthConfig, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let (train, eval) = split_scenes(cfg)?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let train_path = dir.join("train.jsonl");
    let eval_path = dir.join("eval.jsonl");
    write_bundles_file(&train_path, &train)?;
    write_bundles_file(&eval_path, &eval)?;
    Ok((train_path, eval_path))
}

/// Fraction of interacting hands whose nearest object in raw embedding space
/// (among objects overlapping the hand) is the planted target.
pub fn nearest_neighbor_accuracy(bundles: &[SampleBundle]) -> Result<Option<f64>> {
    let (mut hit, mut total) = (0usize, 0usize);
    for b in bundles {
        for side in HandSide::ALL {
            let (Some(hand), Some(target)) = (b.hand(side), planted_target(b, side)) else {
                continue;
            };
            total += 1;
            let scores = b
                .objects
                .iter()
                .map(|o| {
                    Ok(if mask_iou(&o.mask, &hand.mask)? > 0.0 {
                        dot(&o.embedding, &hand.embedding)
                    } else {
                        f64::NEG_INFINITY
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if argmax(scores) == Some(target) {
                hit += 1;
            }
        }
    }
    Ok((total > 0).then(|| hit as f64 / total as f64))
}
