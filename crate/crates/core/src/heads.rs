//! Stage-2 contactness and matching heads.
//!
//! Both heads project object and hand features with their own adapter and
//! score a pair by the dot product of the projections. Scores are stored per
//! object as `[left, right]`.

use crate::data::ModelState;
use crate::error::{Result, WishError};
use crate::numerics::{dot, sigmoid, softmax, AdapterParams};

const LOG_FLOOR: f64 = 1e-12;

/// Logits and probabilities of one head for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PairScores {
    pub logits: Vec<[f64; 2]>,
    pub probs: Vec<[f64; 2]>,
    /// Whether column k carries scores (hand present; for matching also at
    /// least one valid object).
    pub columns: [bool; 2],
}

fn project(adapter: &AdapterParams, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    xs.iter().map(|x| adapter.forward(x)).collect()
}

fn pair_logits(
    adapter: &AdapterParams,
    objects: &[Vec<f64>],
    hands: &[Option<Vec<f64>>; 2],
) -> Result<(Vec<[f64; 2]>, [bool; 2])> {
    let objs = project(adapter, objects)?;
    let hs = [
        hands[0].as_ref().map(|h| adapter.forward(h)).transpose()?,
        hands[1].as_ref().map(|h| adapter.forward(h)).transpose()?,
    ];
    let logits = objs
        .iter()
        .map(|w| {
            let mut row = [0.0; 2];
            for (k, h) in hs.iter().enumerate() {
                if let Some(h) = h {
                    row[k] = dot(w, h);
                }
            }
            row
        })
        .collect();
    Ok((logits, [hs[0].is_some(), hs[1].is_some()]))
}

/// `C_ik = MLP_C(w_i) · MLP_C(h_k)` and `Q = σ(C)`.
pub fn contactness_scores(
    state: &ModelState,
    objects: &[Vec<f64>],
    hands: &[Option<Vec<f64>>; 2],
) -> Result<PairScores> {
    let (logits, columns) = pair_logits(&state.adapters.contact, objects, hands)?;
    let probs = logits
        .iter()
        .map(|row| {
            let mut p = [0.0; 2];
            for k in 0..2 {
                if columns[k] {
                    p[k] = sigmoid(row[k]);
                }
            }
            p
        })
        .collect();
    Ok(PairScores {
        logits,
        probs,
        columns,
    })
}

/// Softmax over the valid entries of a column; invalid entries get exactly 0.
/// `None` when nothing in the column is valid.
pub fn masked_softmax(logits: &[f64], valid: &[bool]) -> Result<Option<Vec<f64>>> {
    if logits.len() != valid.len() {
        return Err(WishError::Shape("mask length".into()));
    }
    let kept: Vec<f64> = logits
        .iter()
        .zip(valid)
        .filter(|(_, ok)| **ok)
        .map(|(l, _)| *l)
        .collect();
    if kept.is_empty() {
        return Ok(None);
    }
    let mut probs = softmax(&kept)?.into_iter();
    Ok(Some(
        valid
            .iter()
            .map(|&ok| if ok { probs.next().unwrap() } else { 0.0 })
            .collect(),
    ))
}

/// `M_ik = MLP_I(w_i) · MLP_I(h_k)`, column-wise softmax over valid objects.
pub fn matching_scores(
    state: &ModelState,
    objects: &[Vec<f64>],
    hands: &[Option<Vec<f64>>; 2],
    valid: &[[bool; 2]],
) -> Result<PairScores> {
    if valid.len() != objects.len() {
        return Err(WishError::Shape("validity rows".into()));
    }
    let (logits, present) = pair_logits(&state.adapters.matching, objects, hands)?;
    let (probs, columns) = column_softmax(&logits, valid, present)?;
    Ok(PairScores {
        logits,
        probs,
        columns,
    })
}

pub(crate) fn column_softmax(
    logits: &[[f64; 2]],
    valid: &[[bool; 2]],
    present: [bool; 2],
) -> Result<(Vec<[f64; 2]>, [bool; 2])> {
    let mut probs = vec![[0.0; 2]; logits.len()];
    let mut columns = [false; 2];
    for k in 0..2 {
        if !present[k] {
            continue;
        }
        let col: Vec<f64> = logits.iter().map(|r| r[k]).collect();
        let ok: Vec<bool> = valid.iter().map(|r| r[k]).collect();
        if let Some(p) = masked_softmax(&col, &ok)? {
            columns[k] = true;
            for (row, v) in probs.iter_mut().zip(p) {
                row[k] = v;
            }
        }
    }
    Ok((probs, columns))
}

/// `-(1 - p)^θ · ln p`, with `ln` floored at `1e-12`.
pub fn focal_term(p: f64, theta: f64) -> f64 {
    -(1.0 - p).powf(theta) * p.max(LOG_FLOOR).ln()
}

/// Focal loss averaged over the valid pairs of one sample, with its gradient
/// with respect to the contact logits. `None` if no pair is valid.
pub fn focal_contact_loss(
    logits: &[[f64; 2]],
    labels: &[[bool; 2]],
    valid: &[[bool; 2]],
    theta: f64,
) -> Result<Option<(f64, Vec<[f64; 2]>)>> {
    if labels.len() != logits.len() || valid.len() != logits.len() {
        return Err(WishError::Shape("focal loss inputs".into()));
    }
    if !(theta >= 0.0) {
        return Err(WishError::Domain("focal exponent must be >= 0".into()));
    }
    let count = valid.iter().flatten().filter(|v| **v).count();
    if count == 0 {
        return Ok(None);
    }
    let n = count as f64;
    let mut loss = 0.0;
    let mut grad = vec![[0.0; 2]; logits.len()];
    for i in 0..logits.len() {
        for k in 0..2 {
            if !valid[i][k] {
                continue;
            }
            let sign = if labels[i][k] { 1.0 } else { -1.0 };
            // p is the probability of the labelled class.
            let p = sigmoid(sign * logits[i][k]);
            let q = sigmoid(-sign * logits[i][k]);
            loss += -q.powf(theta) * p.max(LOG_FLOOR).ln() / n;
            let log_p = p.max(LOG_FLOOR).ln();
            let log_slope = if p >= LOG_FLOOR { q.powf(theta + 1.0) } else { 0.0 };
            let d_term = theta * p * q.powf(theta) * log_p - log_slope;
            grad[i][k] = sign * d_term / n;
        }
    }
    Ok(Some((loss, grad)))
}

/// Cross-entropy terms of one sample's matching head against the labelled
/// hands.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingTerms {
    /// Sum of `-ln P[H_k, k]` over labelled hands.
    pub sum: f64,
    pub terms: usize,
    /// `∂sum/∂M`
    pub grad: Vec<[f64; 2]>,
}

pub fn matching_loss(
    probs: &[[f64; 2]],
    valid: &[[bool; 2]],
    labels: [Option<usize>; 2],
) -> Result<MatchingTerms> {
    if valid.len() != probs.len() {
        return Err(WishError::Shape("matching loss inputs".into()));
    }
    let mut out = MatchingTerms {
        sum: 0.0,
        terms: 0,
        grad: vec![[0.0; 2]; probs.len()],
    };
    for (k, label) in labels.iter().enumerate() {
        let Some(c) = *label else { continue };
        if c >= probs.len() || !valid[c][k] {
            return Err(WishError::Domain(format!(
                "matching label {c} is not a valid candidate for hand {k}"
            )));
        }
        let p = probs[c][k];
        out.sum -= p.max(LOG_FLOOR).ln();
        out.terms += 1;
        if p >= LOG_FLOOR {
            for (i, row) in out.grad.iter_mut().enumerate() {
                if valid[i][k] {
                    row[k] = probs[i][k] - f64::from(u8::from(i == c));
                }
            }
        }
    }
    Ok(out)
}
