//! Joint optimisation of the alignment, contactness and matching objectives.
//!
//! Each batch first derives pseudo-labels from the current Stage-1 adapters;
//! those labels are plain data from then on, so no gradient reaches the label
//! construction. The three losses are then evaluated and back-propagated
//! through the heads and adapters, and every enabled adapter takes one Adam
//! step.

mod config;

pub use config::TrainConfig;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::alignment::{similarity_matrix, BatchScores, UnitSet};
use crate::alignment::nce_loss;
use crate::data::{AdapterKind, HandSide, ModelState, PerAdapter, SampleBundle};
use crate::error::{Result, WishError};
use crate::heads::{column_softmax, focal_contact_loss, matching_loss};
use crate::inference::{matching_accuracy, predict};
use crate::numerics::{dot, AdapterParams, AdapterTrace};
use crate::pseudo_labels::{
    batch_pseudo_labels, condense_scores, hand_ious, CondensedScores, PseudoLabelDump,
    PseudoLabels,
};

/// Per-bundle facts that never change during training.
#[derive(Debug, Clone)]
pub struct SampleGeometry {
    pub hand_iou: Vec<[f64; 2]>,
    pub valid: Vec<[bool; 2]>,
    pub hands_present: [bool; 2],
}

impl SampleGeometry {
    pub fn of(bundle: &SampleBundle) -> Result<Self> {
        let hand_iou = hand_ious(&bundle.visual())?;
        let hands_present = [bundle.hands[0].is_some(), bundle.hands[1].is_some()];
        let valid = hand_iou
            .iter()
            .map(|iou| {
                [
                    hands_present[0] && iou[0] > 0.0,
                    hands_present[1] && iou[1] > 0.0,
                ]
            })
            .collect();
        Ok(Self {
            hand_iou,
            valid,
            hands_present,
        })
    }
}

/// A training sample: the bundle plus its cached geometry.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub bundle: &'a SampleBundle,
    pub geometry: &'a SampleGeometry,
}

impl BatchItem<'_> {
    fn in_nce(&self) -> bool {
        !self.bundle.objects.is_empty() && !self.bundle.phrases.is_empty()
    }

    fn has_heads(&self) -> bool {
        !self.bundle.objects.is_empty() && self.geometry.hands_present.iter().any(|h| *h)
    }
}

/// Loss values of one batch. A component is `None` when no sample in the
/// batch defines it (or it is disabled).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub nce: Option<f64>,
    pub contact: Option<f64>,
    pub matching: Option<f64>,
    pub total: f64,
}

pub fn total_loss(components: &LossBreakdown, config: &TrainConfig) -> f64 {
    let term = |enabled: bool, weight: f64, value: Option<f64>| {
        if enabled {
            weight * value.unwrap_or(0.0)
        } else {
            0.0
        }
    };
    term(config.enable_nce, config.lambda_nce, components.nce)
        + term(config.enable_match, config.lambda_match, components.matching)
        + term(config.enable_contact, config.lambda_contact, components.contact)
}

/// Condensed Stage-1 scores for one sample, if it has objects, phrases and
/// at least one hand.
pub fn condensed_scores(state: &ModelState, item: &BatchItem<'_>) -> Result<Option<CondensedScores>> {
    let b = item.bundle;
    if !item.in_nce() || !item.has_heads() {
        return Ok(None);
    }
    let visual = &state.adapters.visual;
    let textual = &state.adapters.textual;
    let objects = b
        .objects
        .iter()
        .map(|o| visual.forward(&o.embedding))
        .collect::<Result<Vec<_>>>()?;
    let phrases = HandSide::ALL
        .iter()
        .flat_map(|&side| b.phrases.iter().map(move |p| p.embedding(side)))
        .map(|e| textual.forward(e))
        .collect::<Result<Vec<_>>>()?;
    let a = similarity_matrix(&objects, &phrases)?;
    condense_scores(
        &a,
        b.phrases.len(),
        &item.geometry.hand_iou,
        item.geometry.hands_present,
    )
    .map(Some)
}

/// Batch pseudo-labels. Reads only the visual and textual adapters.
pub fn compute_pseudo_labels(
    state: &ModelState,
    batch: &[BatchItem<'_>],
    gamma: f64,
) -> Result<(Option<f64>, Vec<Option<PseudoLabels>>, Vec<Option<CondensedScores>>)> {
    let scores = batch
        .iter()
        .map(|item| condensed_scores(state, item))
        .collect::<Result<Vec<_>>>()?;
    let (rho, labels) = batch_pseudo_labels(&scores, gamma)?;
    Ok((rho, labels, scores))
}

struct VisualForward {
    objects: Vec<AdapterTrace>,
    hands: [Option<AdapterTrace>; 2],
}

struct HeadForward {
    objects: Vec<AdapterTrace>,
    hands: [Option<AdapterTrace>; 2],
    logits: Vec<[f64; 2]>,
}

fn head_forward(adapter: &AdapterParams, vf: &VisualForward) -> Result<HeadForward> {
    let objects = vf
        .objects
        .iter()
        .map(|t| adapter.trace(&t.output))
        .collect::<Result<Vec<_>>>()?;
    let hands = [
        vf.hands[0].as_ref().map(|t| adapter.trace(&t.output)).transpose()?,
        vf.hands[1].as_ref().map(|t| adapter.trace(&t.output)).transpose()?,
    ];
    let logits = objects
        .iter()
        .map(|w| {
            let mut row = [0.0; 2];
            for (k, h) in hands.iter().enumerate() {
                if let Some(h) = h {
                    row[k] = dot(&w.output, &h.output);
                }
            }
            row
        })
        .collect();
    Ok(HeadForward {
        objects,
        hands,
        logits,
    })
}

/// Back-propagates `∂loss/∂logits` through a head; adds the input gradients
/// to `d_objects` / `d_hands` when they are being tracked.
fn head_backward(
    adapter: &AdapterParams,
    hf: &HeadForward,
    d_logits: &[[f64; 2]],
    grads: &mut AdapterParams,
    inputs: Option<(&mut [Vec<f64>], &mut [Option<Vec<f64>>; 2])>,
) -> Result<()> {
    let dim = adapter.input_dim();
    let mut d_obj_out = vec![vec![0.0; dim]; hf.objects.len()];
    let mut d_hand_out = [vec![0.0; dim], vec![0.0; dim]];
    for (i, row) in d_logits.iter().enumerate() {
        for k in 0..2 {
            let d = row[k];
            if d == 0.0 {
                continue;
            }
            let Some(h) = &hf.hands[k] else { continue };
            let w = &hf.objects[i].output;
            for (o, hv) in d_obj_out[i].iter_mut().zip(&h.output) {
                *o += d * hv;
            }
            for (o, wv) in d_hand_out[k].iter_mut().zip(w) {
                *o += d * wv;
            }
        }
    }
    let mut inputs = inputs;
    for (i, (trace, up)) in hf.objects.iter().zip(&d_obj_out).enumerate() {
        if up.iter().all(|v| *v == 0.0) {
            continue;
        }
        let dx = adapter.backward_into(trace, up, grads)?;
        if let Some((d_objects, _)) = inputs.as_mut() {
            add_into(&mut d_objects[i], &dx);
        }
    }
    for k in 0..2 {
        let Some(trace) = &hf.hands[k] else { continue };
        if d_hand_out[k].iter().all(|v| *v == 0.0) {
            continue;
        }
        let dx = adapter.backward_into(trace, &d_hand_out[k], grads)?;
        if let Some((_, d_hands)) = inputs.as_mut() {
            add_into(d_hands[k].get_or_insert_with(|| vec![0.0; dim]), &dx);
        }
    }
    Ok(())
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Evaluates the weighted objective on a batch with fixed pseudo-labels and,
/// when `grads` is given, accumulates `∂total/∂params` into it.
///
/// Head losses reach the visual adapter only when the alignment stage is
/// enabled; otherwise the Stage-1 adapters stay frozen.
pub fn batch_objective(
    state: &ModelState,
    batch: &[BatchItem<'_>],
    labels: &[Option<PseudoLabels>],
    config: &TrainConfig,
    mut grads: Option<&mut PerAdapter<AdapterParams>>,
) -> Result<LossBreakdown> {
    if labels.len() != batch.len() {
        return Err(WishError::Shape("one label slot per batch item".into()));
    }
    let visual = &state.adapters.visual;
    let textual = &state.adapters.textual;
    let dim = state.d_v;
    let stage1_trainable = config.enable_nce;

    let vis = batch
        .iter()
        .map(|item| -> Result<VisualForward> {
            let b = item.bundle;
            Ok(VisualForward {
                objects: b
                    .objects
                    .iter()
                    .map(|o| visual.trace(&o.embedding))
                    .collect::<Result<Vec<_>>>()?,
                hands: [
                    b.hands[0].as_ref().map(|h| visual.trace(&h.embedding)).transpose()?,
                    b.hands[1].as_ref().map(|h| visual.trace(&h.embedding)).transpose()?,
                ],
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut d_obj: Vec<Vec<Vec<f64>>> = vis
        .iter()
        .map(|v| vec![vec![0.0; dim]; v.objects.len()])
        .collect();
    let mut d_hand: Vec<[Option<Vec<f64>>; 2]> = vec![[None, None]; batch.len()];
    let mut out = LossBreakdown::default();

    if config.enable_nce {
        let members: Vec<usize> = (0..batch.len()).filter(|&i| batch[i].in_nce()).collect();
        if !members.is_empty() {
            let phrase_traces = members
                .iter()
                .map(|&i| {
                    let b = batch[i].bundle;
                    HandSide::ALL
                        .iter()
                        .flat_map(|&side| b.phrases.iter().map(move |p| p.embedding(side)))
                        .map(|e| textual.trace(e))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let obj_units = members
                .iter()
                .map(|&i| {
                    let outs: Vec<Vec<f64>> = vis[i].objects.iter().map(|t| t.output.clone()).collect();
                    UnitSet::new(&outs)
                })
                .collect::<Result<Vec<_>>>()?;
            let phr_units = phrase_traces
                .iter()
                .map(|ts| {
                    let outs: Vec<Vec<f64>> = ts.iter().map(|t| t.output.clone()).collect();
                    UnitSet::new(&outs)
                })
                .collect::<Result<Vec<_>>>()?;
            let scores = BatchScores::compute(&obj_units, &phr_units)?;
            let (loss, mut d_scores) = nce_loss(&scores.scores, state.tau)?;
            out.nce = Some(loss);
            if let Some(g) = grads.as_deref_mut() {
                d_scores.data.iter_mut().for_each(|d| *d *= config.lambda_nce);
                let (d_w, d_q) = scores.backward(&d_scores, &obj_units, &phr_units);
                for (slot, &i) in members.iter().enumerate() {
                    for (acc, d) in d_obj[i].iter_mut().zip(&d_w[slot]) {
                        add_into(acc, d);
                    }
                    for (trace, d) in phrase_traces[slot].iter().zip(&d_q[slot]) {
                        textual.backward_into(trace, d, &mut g.textual)?;
                    }
                }
            }
        }
    }

    let heads_needed = config.enable_contact || config.enable_match;
    if heads_needed {
        let mut contact_sum = 0.0;
        let mut contact_samples = 0usize;
        let mut contact_grads: Vec<Option<(usize, Vec<[f64; 2]>, HeadForward)>> = Vec::new();
        let mut match_sum = 0.0;
        let mut match_terms = 0usize;
        let mut match_grads: Vec<Option<(usize, Vec<[f64; 2]>, HeadForward)>> = Vec::new();

        for (idx, item) in batch.iter().enumerate() {
            let Some(lab) = &labels[idx] else { continue };
            if !item.has_heads() {
                continue;
            }
            let valid = &item.geometry.valid;
            if config.enable_contact {
                let hf = head_forward(&state.adapters.contact, &vis[idx])?;
                if let Some((loss, g)) =
                    focal_contact_loss(&hf.logits, &lab.contact, valid, config.theta)?
                {
                    contact_sum += loss;
                    contact_samples += 1;
                    contact_grads.push(Some((idx, g, hf)));
                }
            }
            if config.enable_match && lab.matching.iter().any(Option::is_some) {
                let hf = head_forward(&state.adapters.matching, &vis[idx])?;
                let present = item.geometry.hands_present;
                let (probs, _) = column_softmax(&hf.logits, valid, present)?;
                let t = matching_loss(&probs, valid, lab.matching)?;
                if t.terms > 0 {
                    match_sum += t.sum;
                    match_terms += t.terms;
                    match_grads.push(Some((idx, t.grad, hf)));
                }
            }
        }

        if contact_samples > 0 {
            out.contact = Some(contact_sum / contact_samples as f64);
        }
        if match_terms > 0 {
            out.matching = Some(match_sum / match_terms as f64);
        }

        if let Some(g) = grads.as_deref_mut() {
            let scale_c = config.lambda_contact / contact_samples.max(1) as f64;
            for (idx, dl, hf) in contact_grads.into_iter().flatten() {
                let dl: Vec<[f64; 2]> = dl.iter().map(|r| [r[0] * scale_c, r[1] * scale_c]).collect();
                let inputs = stage1_trainable.then_some((&mut d_obj[idx][..], &mut d_hand[idx]));
                head_backward(&state.adapters.contact, &hf, &dl, &mut g.contact, inputs)?;
            }
            let scale_m = config.lambda_match / match_terms.max(1) as f64;
            for (idx, dl, hf) in match_grads.into_iter().flatten() {
                let dl: Vec<[f64; 2]> = dl.iter().map(|r| [r[0] * scale_m, r[1] * scale_m]).collect();
                let inputs = stage1_trainable.then_some((&mut d_obj[idx][..], &mut d_hand[idx]));
                head_backward(&state.adapters.matching, &hf, &dl, &mut g.matching, inputs)?;
            }
        }
    }

    if let Some(g) = grads {
        if stage1_trainable {
            for (idx, vf) in vis.iter().enumerate() {
                for (trace, d) in vf.objects.iter().zip(&d_obj[idx]) {
                    if d.iter().any(|v| *v != 0.0) {
                        visual.backward_into(trace, d, &mut g.visual)?;
                    }
                }
                for k in 0..2 {
                    if let (Some(trace), Some(d)) = (&vf.hands[k], &d_hand[idx][k]) {
                        visual.backward_into(trace, d, &mut g.visual)?;
                    }
                }
            }
        }
    }

    out.total = total_loss(&out, config);
    Ok(out)
}

/// One epoch's worth of diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub nce: Option<f64>,
    pub contact: Option<f64>,
    pub matching: Option<f64>,
    pub total: f64,
    /// Fraction of valid (object, hand) pairs labelled as in contact.
    pub positive_rate: Option<f64>,
    /// Post-epoch matching accuracy against ground truth, when available.
    pub matching_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }
}

fn embedding_dim(bundles: &[SampleBundle]) -> Result<usize> {
    let mut dim = None;
    for b in bundles {
        match (dim, b.embedding_dim()) {
            (Some(d), Some(e)) if d != e => {
                return Err(WishError::Shape(format!(
                    "bundle {} has embedding dim {e}, expected {d}",
                    b.id
                )))
            }
            (None, Some(e)) => dim = Some(e),
            _ => {}
        }
    }
    dim.ok_or(WishError::Empty("no embeddings in training data"))
}

fn usable(b: &SampleBundle) -> bool {
    !b.objects.is_empty() && (!b.phrases.is_empty() || b.hands.iter().any(Option::is_some))
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn add(&mut self, v: Option<f64>) {
        if let Some(v) = v {
            self.sum += v;
            self.n += 1;
        }
    }

    fn get(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Trains a fresh model. With the alignment loss disabled, the visual and
/// textual adapters start (and stay) at identity.
pub fn train(bundles: &[SampleBundle], config: &TrainConfig) -> Result<(ModelState, TrainLog)> {
    config.validate()?;
    let d_v = embedding_dim(bundles)?;
    let mut state = ModelState::init(d_v, config)?;
    if !config.enable_nce {
        // Without the alignment loss the Stage-1 adapters stay at identity.
        for kind in [AdapterKind::Visual, AdapterKind::Textual] {
            let zero = state.adapters.get(kind).zeros_like();
            *state.adapters.get_mut(kind) = zero;
        }
    }
    train_from(state, bundles, config)
}

/// Continues training from an existing state.
pub fn train_from(
    mut state: ModelState,
    bundles: &[SampleBundle],
    config: &TrainConfig,
) -> Result<(ModelState, TrainLog)> {
    config.validate()?;
    let geometry = bundles
        .iter()
        .map(SampleGeometry::of)
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..bundles.len()).filter(|&i| usable(&bundles[i])).collect();
    let skipped = bundles.len() - order.len();
    if skipped > 0 {
        log::info!("{skipped} samples without objects or supervision are skipped");
    }
    if order.is_empty() {
        return Err(WishError::Empty("no usable training samples"));
    }
    if state.optimizer.is_none() {
        state.optimizer = Some(PerAdapter::from_fn(|k| {
            crate::numerics::AdamState::new(config.lr, state.adapters.get(k))
        }));
    }
    state.config = config.clone();
    state.tau = config.tau;
    let has_gt = bundles.iter().any(|b| b.gt.is_some());

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut nce, mut contact, mut matching, mut total) =
            (Mean::default(), Mean::default(), Mean::default(), Mean::default());
        let (mut positives, mut valid_pairs) = (0usize, 0usize);
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<BatchItem<'_>> = chunk
                .iter()
                .map(|&i| BatchItem {
                    bundle: &bundles[i],
                    geometry: &geometry[i],
                })
                .collect();
            let (_, labels, scores) = compute_pseudo_labels(&state, &batch, config.gamma)?;
            for (lab, sc) in labels.iter().zip(&scores) {
                if let (Some(lab), Some(sc)) = (lab, sc) {
                    valid_pairs += sc.valid_values().count();
                    positives += lab.contact.iter().flatten().filter(|c| **c).count();
                }
            }
            let mut grads = PerAdapter::from_fn(|k| state.adapters.get(k).zeros_like());
            let losses = batch_objective(&state, &batch, &labels, config, Some(&mut grads))?;
            for (name, v) in [
                ("nce", losses.nce),
                ("contact", losses.contact),
                ("matching", losses.matching),
                ("total", Some(losses.total)),
            ] {
                if v.is_some_and(|v| !v.is_finite()) {
                    log::error!("epoch {epoch} batch {batch_no}: {name} loss is {v:?}");
                    return Err(WishError::NonFiniteLoss {
                        component: name,
                        epoch,
                        batch: batch_no,
                    });
                }
            }
            nce.add(losses.nce);
            contact.add(losses.contact);
            matching.add(losses.matching);
            total.add(Some(losses.total));
            let optimizer = state.optimizer.as_mut().expect("optimizer initialised above");
            for kind in AdapterKind::ALL {
                let enabled = match kind {
                    AdapterKind::Visual | AdapterKind::Textual => config.enable_nce,
                    AdapterKind::Contact => config.enable_contact,
                    AdapterKind::Matching => config.enable_match,
                };
                if enabled {
                    optimizer.get_mut(kind).step(state.adapters.get_mut(kind), grads.get(kind))?;
                }
            }
        }
        let matching_accuracy = if has_gt {
            let preds = bundles
                .iter()
                .map(|b| predict(&state, &b.visual()))
                .collect::<Result<Vec<_>>>()?;
            matching_accuracy(&preds, bundles)?
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            nce: nce.get(),
            contact: contact.get(),
            matching: matching.get(),
            total: total.get().unwrap_or(0.0),
            positive_rate: (valid_pairs > 0).then(|| positives as f64 / valid_pairs as f64),
            matching_accuracy,
        };
        log::info!(
            "epoch {epoch}: total {:.5} nce {} contact {} match {} acc {}",
            entry.total,
            fmt_opt(entry.nce),
            fmt_opt(entry.contact),
            fmt_opt(entry.matching),
            fmt_opt(entry.matching_accuracy)
        );
        log.epochs.push(entry);
    }
    Ok((state, log))
}

/// Pseudo-labels the current model assigns to `bundles`, batched in file order.
pub fn pseudo_label_dump(
    state: &ModelState,
    bundles: &[SampleBundle],
    config: &TrainConfig,
) -> Result<Vec<PseudoLabelDump>> {
    let geometry = bundles
        .iter()
        .map(SampleGeometry::of)
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    let items: Vec<BatchItem<'_>> = bundles
        .iter()
        .zip(&geometry)
        .map(|(bundle, geometry)| BatchItem { bundle, geometry })
        .collect();
    for (batch_no, chunk) in items.chunks(config.batch_size).enumerate() {
        let (rho, labels, scores) = compute_pseudo_labels(state, chunk, config.gamma)?;
        for ((item, lab), sc) in chunk.iter().zip(labels).zip(scores) {
            if let (Some(lab), Some(sc)) = (lab, sc) {
                out.push(PseudoLabelDump {
                    id: item.bundle.id.clone(),
                    batch: batch_no,
                    rho,
                    condensed: sc.values,
                    valid: sc.valid,
                    contact: lab.contact,
                    matching: lab.matching,
                });
            }
        }
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.5}"))
}
