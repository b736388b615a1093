//! Narration-free prediction and mask-level evaluation.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{
    mask_intersection_area, mask_union_area, GroundTruth, HandSide, ModelState, RleMask,
    RleWire, SampleBundle, VisualView,
};
use crate::error::{Result, WishError};
use crate::heads::{contactness_scores, matching_scores};
use crate::numerics::argmax;
use crate::pseudo_labels::{hand_ious, validity_mask};

/// Contact probability at or above which a hand is treated as holding its
/// matched object.
pub const CONTACT_THRESHOLD: f64 = 0.5;

/// In-hand object masks predicted for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub left: Option<RleMask>,
    pub right: Option<RleMask>,
    pub both: Option<RleMask>,
    /// Object held by each hand after contact gating.
    pub selected: [Option<usize>; 2],
    /// Contact probability of each hand's best matching candidate.
    pub contact_prob: [Option<f64>; 2],
    pub hands_detected: usize,
}

impl Prediction {
    fn empty(view: &VisualView<'_>) -> Self {
        Self {
            id: view.id.to_string(),
            width: view.width,
            height: view.height,
            left: None,
            right: None,
            both: None,
            selected: [None, None],
            contact_prob: [None, None],
            hands_detected: view.hands.iter().flatten().count(),
        }
    }

    fn with_selection(view: &VisualView<'_>, selected: [Option<usize>; 2]) -> Self {
        let mut p = Self::empty(view);
        p.selected = selected;
        let mask = |i: usize| view.objects[i].mask.clone();
        match selected {
            [Some(l), Some(r)] if l == r => p.both = Some(mask(l)),
            [l, r] => {
                p.left = l.map(mask);
                p.right = r.map(mask);
            }
        }
        p
    }

    pub fn mask(&self, class: MaskClass) -> RleMask {
        let pick = |m: &Option<RleMask>| m.clone().unwrap_or_else(|| RleMask::empty(self.width, self.height));
        match class {
            MaskClass::Left => pick(&self.left),
            MaskClass::Right => pick(&self.right),
            MaskClass::Both => pick(&self.both),
            MaskClass::Either => union3(
                &pick(&self.left),
                &pick(&self.right),
                &pick(&self.both),
            ),
        }
    }
}

fn union3(a: &RleMask, b: &RleMask, c: &RleMask) -> RleMask {
    a.union(b).and_then(|ab| ab.union(c)).expect("masks share the image size")
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionWire {
    id: String,
    width: u32,
    height: u32,
    left: Option<RleWire>,
    right: Option<RleWire>,
    both: Option<RleWire>,
    #[serde(default)]
    left_index: Option<usize>,
    #[serde(default)]
    right_index: Option<usize>,
    #[serde(default)]
    left_prob: Option<f64>,
    #[serde(default)]
    right_prob: Option<f64>,
    #[serde(default)]
    hands_detected: usize,
}

pub fn prediction_to_json(p: &Prediction) -> Result<String> {
    let wire = PredictionWire {
        id: p.id.clone(),
        width: p.width,
        height: p.height,
        left: p.left.as_ref().map(RleWire::from_mask),
        right: p.right.as_ref().map(RleWire::from_mask),
        both: p.both.as_ref().map(RleWire::from_mask),
        left_index: p.selected[0],
        right_index: p.selected[1],
        left_prob: p.contact_prob[0],
        right_prob: p.contact_prob[1],
        hands_detected: p.hands_detected,
    };
    Ok(serde_json::to_string(&wire)?)
}

pub fn parse_prediction(line: &str) -> Result<Prediction> {
    let w: PredictionWire = serde_json::from_str(line)?;
    let mask = |m: Option<RleWire>| m.map(|m| m.into_mask(w.width, w.height)).transpose();
    Ok(Prediction {
        left: mask(w.left)?,
        right: mask(w.right)?,
        both: mask(w.both)?,
        id: w.id,
        width: w.width,
        height: w.height,
        selected: [w.left_index, w.right_index],
        contact_prob: [w.left_prob, w.right_prob],
        hands_detected: w.hands_detected,
    })
}

pub fn load_predictions<R: std::io::BufRead>(reader: R) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_prediction(&line).map_err(|e| WishError::Line {
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_predictions<W: std::io::Write>(mut writer: W, preds: &[Prediction]) -> Result<()> {
    for p in preds {
        writeln!(writer, "{}", prediction_to_json(p)?)?;
    }
    Ok(())
}

/// Predicts in-hand objects from visual evidence only.
pub fn predict(state: &ModelState, view: &VisualView<'_>) -> Result<Prediction> {
    if view.objects.is_empty() || view.hands.iter().all(Option::is_none) {
        return Ok(Prediction::empty(view));
    }
    let visual = &state.adapters.visual;
    let objects = view
        .objects
        .iter()
        .map(|o| visual.forward(&o.embedding))
        .collect::<Result<Vec<_>>>()?;
    let hands = [
        view.hands[0].as_ref().map(|h| visual.forward(&h.embedding)).transpose()?,
        view.hands[1].as_ref().map(|h| visual.forward(&h.embedding)).transpose()?,
    ];
    let valid = validity_mask(view)?;
    let matching = matching_scores(state, &objects, &hands, &valid)?;
    let contact = contactness_scores(state, &objects, &hands)?;

    let mut selected = [None, None];
    let mut probs = [None, None];
    for k in 0..2 {
        if !matching.columns[k] {
            continue;
        }
        let candidate = argmax(
            matching
                .probs
                .iter()
                .zip(&valid)
                .map(|(p, ok)| if ok[k] { p[k] } else { f64::NEG_INFINITY }),
        )
        .expect("column has a valid object");
        let q = contact.probs[candidate][k];
        probs[k] = Some(q);
        if q >= CONTACT_THRESHOLD {
            selected[k] = Some(candidate);
        }
    }
    let mut p = Prediction::with_selection(view, selected);
    p.contact_prob = probs;
    Ok(p)
}

/// Assigns each hand the overlapping object of highest IoU, without any
/// learned component.
pub fn iou_contact_baseline(view: &VisualView<'_>) -> Result<Prediction> {
    let ious = hand_ious(view)?;
    let mut selected = [None, None];
    for (k, slot) in selected.iter_mut().enumerate() {
        if view.hands[k].is_none() {
            continue;
        }
        if let Some(i) = argmax(ious.iter().map(|r| r[k])) {
            if ious[i][k] > 0.0 {
                *slot = Some(i);
            }
        }
    }
    Ok(Prediction::with_selection(view, selected))
}

/// A hand box from an upstream detector, before side assignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandDetection {
    pub center_x: f64,
    pub confidence: f64,
}

/// Maps raw detections to hand sides: at most the two most confident are
/// kept; a lone hand goes by image half, a pair by horizontal order.
/// Returns `(detection index, side)` pairs.
pub fn hand_side_assign(detections: &[HandDetection], width: u32) -> Vec<(usize, HandSide)> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .confidence
            .total_cmp(&detections[a].confidence)
            .then(a.cmp(&b))
    });
    if order.len() > 2 {
        log::warn!(
            "{} hand detections, keeping the two most confident",
            order.len()
        );
        order.truncate(2);
    }
    match order[..] {
        [] => Vec::new(),
        [only] => {
            let side = if detections[only].center_x < f64::from(width) / 2.0 {
                HandSide::Left
            } else {
                HandSide::Right
            };
            vec![(only, side)]
        }
        [a, b] => {
            let (l, r) = if detections[a].center_x <= detections[b].center_x {
                (a, b)
            } else {
                (b, a)
            };
            vec![(l, HandSide::Left), (r, HandSide::Right)]
        }
        _ => unreachable!("truncated to two"),
    }
}

/// Evaluation mask classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskClass {
    Either,
    Left,
    Right,
    Both,
}

impl MaskClass {
    pub const ALL: [MaskClass; 4] = [
        MaskClass::Either,
        MaskClass::Left,
        MaskClass::Right,
        MaskClass::Both,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskClass::Either => "either",
            MaskClass::Left => "left",
            MaskClass::Right => "right",
            MaskClass::Both => "both",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

fn gt_mask(gt: Option<&GroundTruth>, class: MaskClass, width: u32, height: u32) -> RleMask {
    let empty = || RleMask::empty(width, height);
    let get = |m: Option<&RleMask>| m.cloned().unwrap_or_else(empty);
    let Some(gt) = gt else { return empty() };
    match class {
        MaskClass::Left => get(gt.left.as_ref()),
        MaskClass::Right => get(gt.right.as_ref()),
        MaskClass::Both => get(gt.both.as_ref()),
        MaskClass::Either => union3(
            &get(gt.left.as_ref()),
            &get(gt.right.as_ref()),
            &get(gt.both.as_ref()),
        ),
    }
}

/// Summed intersection and union of one class over a dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ClassTotals {
    pub intersection: u64,
    pub union: u64,
}

impl ClassTotals {
    /// `None` when the class never occurs in either predictions or ground truth.
    pub fn iou(&self) -> Option<f64> {
        (self.union > 0).then(|| self.intersection as f64 / self.union as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub images: usize,
    pub hands_detected: usize,
    pub contacts_predicted: usize,
    pub iou_either: Option<f64>,
    pub iou_left: Option<f64>,
    pub iou_right: Option<f64>,
    pub iou_both: Option<f64>,
    /// Mean over the left/right/both classes that occur.
    pub mean_lrb: Option<f64>,
    pub totals: [ClassTotals; 4],
}

impl EvalReport {
    pub fn iou(&self, class: MaskClass) -> Option<f64> {
        self.totals[class.index()].iou()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
        writeln!(f, "{:<8} {:>8}", "class", "IoU (%)")?;
        for class in MaskClass::ALL {
            writeln!(f, "{:<8} {:>8}", class.name(), cell(self.iou(class)))?;
        }
        writeln!(f, "{:<8} {:>8}", "mean-lrb", cell(self.mean_lrb))?;
        write!(
            f,
            "{} images, {} hands, {} contacts",
            self.images, self.hands_detected, self.contacts_predicted
        )
    }
}

/// Dataset-level IoU of predictions against ground truth, paired by position.
pub fn evaluate(preds: &[Prediction], gts: &[SampleBundle]) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(WishError::IdMismatch(format!(
            "{} predictions for {} ground-truth images",
            preds.len(),
            gts.len()
        )));
    }
    let mut totals = [ClassTotals::default(); 4];
    let mut hands = 0;
    let mut contacts = 0;
    for (p, g) in preds.iter().zip(gts) {
        if p.id != g.id {
            return Err(WishError::IdMismatch(format!(
                "prediction {} paired with ground truth {}",
                p.id, g.id
            )));
        }
        if (p.width, p.height) != (g.width, g.height) {
            return Err(WishError::Shape(format!(
                "image {}: prediction is {}x{}, ground truth {}x{}",
                p.id, p.width, p.height, g.width, g.height
            )));
        }
        hands += p.hands_detected;
        contacts += p.selected.iter().flatten().count();
        for class in MaskClass::ALL {
            let pm = p.mask(class);
            let gm = gt_mask(g.gt.as_ref(), class, g.width, g.height);
            let t = &mut totals[class.index()];
            t.intersection += mask_intersection_area(&pm, &gm)?;
            t.union += mask_union_area(&pm, &gm)?;
        }
    }
    let lrb: Vec<f64> = [MaskClass::Left, MaskClass::Right, MaskClass::Both]
        .iter()
        .filter_map(|c| totals[c.index()].iou())
        .collect();
    Ok(EvalReport {
        images: preds.len(),
        hands_detected: hands,
        contacts_predicted: contacts,
        iou_either: totals[0].iou(),
        iou_left: totals[1].iou(),
        iou_right: totals[2].iou(),
        iou_both: totals[3].iou(),
        mean_lrb: (!lrb.is_empty()).then(|| lrb.iter().sum::<f64>() / lrb.len() as f64),
        totals,
    })
}

/// Like [`evaluate`], but pairs predictions with ground truth by id. Every
/// ground-truth image needs exactly one prediction.
pub fn evaluate_by_id(preds: &[Prediction], gts: &[SampleBundle]) -> Result<EvalReport> {
    let mut by_id: HashMap<&str, &Prediction> = HashMap::with_capacity(preds.len());
    for p in preds {
        if by_id.insert(p.id.as_str(), p).is_some() {
            return Err(WishError::IdMismatch(format!("duplicate prediction for {}", p.id)));
        }
    }
    if preds.len() != gts.len() {
        return Err(WishError::IdMismatch(format!(
            "{} predictions for {} ground-truth images",
            preds.len(),
            gts.len()
        )));
    }
    let ordered = gts
        .iter()
        .map(|g| {
            by_id
                .get(g.id.as_str())
                .map(|p| (*p).clone())
                .ok_or_else(|| WishError::IdMismatch(format!("no prediction for {}", g.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(&ordered, gts)
}

/// Index of the object whose mask is the ground-truth in-hand mask of `side`.
pub fn planted_target(bundle: &SampleBundle, side: HandSide) -> Option<usize> {
    let gt = bundle.gt.as_ref()?;
    let own = match side {
        HandSide::Left => gt.left.as_ref(),
        HandSide::Right => gt.right.as_ref(),
    };
    let target = own.or(gt.both.as_ref())?;
    bundle.objects.iter().position(|o| &o.mask == target)
}

/// Fraction of interacting hands whose selected object is the ground-truth
/// one. `None` if no hand has a recoverable target.
pub fn matching_accuracy(preds: &[Prediction], bundles: &[SampleBundle]) -> Result<Option<f64>> {
    if preds.len() != bundles.len() {
        return Err(WishError::IdMismatch("prediction count".into()));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, b) in preds.iter().zip(bundles) {
        for side in HandSide::ALL {
            if b.hand(side).is_none() {
                continue;
            }
            if let Some(t) = planted_target(b, side) {
                total += 1;
                if p.selected[side.index()] == Some(t) {
                    hit += 1;
                }
            }
        }
    }
    Ok((total > 0).then(|| hit as f64 / total as f64))
}
