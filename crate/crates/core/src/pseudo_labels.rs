//! Contact and matching pseudo-labels derived from Stage-1 similarities.

use serde::Serialize;

use crate::alignment::SimilarityMatrix;
use crate::data::{mask_iou, HandSide, VisualView};
use crate::error::{Result, WishError};

/// Per-object, per-hand strongest phrase evidence, with the IoU validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedScores {
    /// `values[i][k]`: max similarity of object `i` to any hand-`k` phrase.
    pub values: Vec<[f64; 2]>,
    pub valid: Vec<[bool; 2]>,
}

impl CondensedScores {
    pub fn num_objects(&self) -> usize {
        self.values.len()
    }

    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values
            .iter()
            .zip(&self.valid)
            .flat_map(|(v, ok)| (0..2).filter(move |&k| ok[k]).map(move |k| v[k]))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PseudoLabels {
    /// `contact[i][k]`
    pub contact: Vec<[bool; 2]>,
    /// Matched object per hand, indexed by [`HandSide::index`].
    pub matching: [Option<usize>; 2],
}

/// IoU of every object mask against every hand mask; 0 where a hand is absent.
pub fn hand_ious(view: &VisualView<'_>) -> Result<Vec<[f64; 2]>> {
    view.objects
        .iter()
        .map(|o| {
            let mut row = [0.0; 2];
            for side in HandSide::ALL {
                if let Some(h) = &view.hands[side.index()] {
                    row[side.index()] = mask_iou(&o.mask, &h.mask)?;
                }
            }
            Ok(row)
        })
        .collect()
}

/// An (object, hand) pair is a legal candidate only if the hand exists and
/// the masks overlap.
pub fn validity_mask(view: &VisualView<'_>) -> Result<Vec<[bool; 2]>> {
    let present = [view.hands[0].is_some(), view.hands[1].is_some()];
    Ok(hand_ious(view)?
        .into_iter()
        .map(|iou| [present[0] && iou[0] > 0.0, present[1] && iou[1] > 0.0])
        .collect())
}

pub fn condense_scores(
    a: &SimilarityMatrix,
    phrases: usize,
    hand_iou: &[[f64; 2]],
    hands_present: [bool; 2],
) -> Result<CondensedScores> {
    if a.cols != 2 * phrases || phrases == 0 {
        return Err(WishError::Shape(format!(
            "{} similarity columns for {phrases} phrases",
            a.cols
        )));
    }
    if hand_iou.len() != a.rows {
        return Err(WishError::Shape("one IoU row per object required".into()));
    }
    let values = (0..a.rows)
        .map(|i| {
            let row = a.row(i);
            let block_max = |k: usize| {
                row[k * phrases..(k + 1) * phrases]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            [block_max(0), block_max(1)]
        })
        .collect();
    let valid = hand_iou
        .iter()
        .map(|iou| {
            [
                hands_present[0] && iou[0] > 0.0,
                hands_present[1] && iou[1] > 0.0,
            ]
        })
        .collect();
    Ok(CondensedScores { values, valid })
}

/// Nearest-rank (lower) percentile: the value at sorted index `ceil(γ·n) - 1`.
pub fn percentile_threshold(values: &[f64], gamma: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(WishError::Empty("percentile of an empty set"));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(WishError::Domain(format!("percentile {gamma} outside (0, 1)")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (gamma * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.max(1) - 1])
}

pub fn contact_pseudo_labels(scores: &CondensedScores, rho: f64) -> Vec<[bool; 2]> {
    scores
        .values
        .iter()
        .zip(&scores.valid)
        .map(|(v, ok)| [ok[0] && v[0] > rho, ok[1] && v[1] > rho])
        .collect()
}

/// Highest-scoring valid object per hand, lowest index on ties.
pub fn matching_pseudo_labels(scores: &CondensedScores) -> [Option<usize>; 2] {
    let pick = |k: usize| {
        let mut best: Option<(usize, f64)> = None;
        for (i, (v, ok)) in scores.values.iter().zip(&scores.valid).enumerate() {
            if !ok[k] {
                continue;
            }
            if best.is_none_or(|(_, b)| v[k] > b) {
                best = Some((i, v[k]));
            }
        }
        best.map(|(i, _)| i)
    };
    [pick(0), pick(1)]
}

/// Labels for a whole batch. `ρ` pools the valid condensed scores of every
/// sample that has them; samples without scores get no labels.
pub fn batch_pseudo_labels(
    scores: &[Option<CondensedScores>],
    gamma: f64,
) -> Result<(Option<f64>, Vec<Option<PseudoLabels>>)> {
    let pool: Vec<f64> = scores
        .iter()
        .flatten()
        .flat_map(|s| s.valid_values())
        .collect();
    let rho = if pool.is_empty() {
        None
    } else {
        Some(percentile_threshold(&pool, gamma)?)
    };
    let labels = scores
        .iter()
        .map(|s| {
            s.as_ref().map(|s| PseudoLabels {
                contact: match rho {
                    Some(r) => contact_pseudo_labels(s, r),
                    None => vec![[false; 2]; s.num_objects()],
                },
                matching: matching_pseudo_labels(s),
            })
        })
        .collect();
    Ok((rho, labels))
}

/// Debug record of how one sample's labels came about.
#[derive(Debug, Clone, Serialize)]
pub struct PseudoLabelDump {
    pub id: String,
    pub batch: usize,
    pub rho: Option<f64>,
    pub condensed: Vec<[f64; 2]>,
    pub valid: Vec<[bool; 2]>,
    pub contact: Vec<[bool; 2]>,
    pub matching: [Option<usize>; 2],
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cs(values: Vec<[f64; 2]>, valid: Vec<[bool; 2]>) -> CondensedScores {
        CondensedScores { values, valid }
    }

    #[test]
    fn condense_examples() {
        let a = SimilarityMatrix::from_rows(vec![vec![0.1, 0.4, 0.3, 0.2]]).unwrap();
        let c = condense_scores(&a, 2, &[[0.5, 0.5]], [true, true]).unwrap();
        assert_eq!(c.values, vec![[0.4, 0.3]]);
        assert_eq!(c.valid, vec![[true, true]]);

        let a = SimilarityMatrix::from_rows(vec![vec![0.1, 0.2], vec![0.3, -0.4]]).unwrap();
        let c = condense_scores(&a, 1, &[[0.0, 0.0], [0.2, 0.0]], [true, true]).unwrap();
        assert_eq!(c.values, vec![[0.1, 0.2], [0.3, -0.4]]);
        assert_eq!(c.valid, vec![[false, false], [true, false]]);

        let c = condense_scores(&a, 1, &[[0.3, 0.3], [0.2, 0.2]], [true, false]).unwrap();
        assert!(c.valid.iter().all(|v| !v[1]));
        assert!(condense_scores(&a, 2, &[[0.0; 2]; 2], [true; 2]).is_err());
    }

    #[test]
    fn percentile_examples() {
        let v: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert_eq!(percentile_threshold(&v, 0.3).unwrap(), 0.3);
        assert_eq!(percentile_threshold(&[0.42], 0.3).unwrap(), 0.42);
        assert_eq!(percentile_threshold(&[0.42], 0.9).unwrap(), 0.42);
        let flat = [0.5; 6];
        let rho = percentile_threshold(&flat, 0.3).unwrap();
        assert_eq!(rho, 0.5);
        let s = cs(vec![[0.5, 0.5]; 3], vec![[true, true]; 3]);
        assert!(contact_pseudo_labels(&s, rho).iter().all(|r| !r[0] && !r[1]));
        assert!(percentile_threshold(&[], 0.3).is_err());
    }

    #[test]
    fn contact_examples() {
        let s = cs(vec![[0.4, 0.3]], vec![[true, true]]);
        assert_eq!(contact_pseudo_labels(&s, 0.3), vec![[true, false]]);
        let s = cs(vec![[0.9, 0.9]], vec![[false, false]]);
        assert_eq!(contact_pseudo_labels(&s, 0.0), vec![[false, false]]);
        let s = cs(vec![[0.4, 0.3], [0.1, 0.2]], vec![[true; 2]; 2]);
        assert_eq!(contact_pseudo_labels(&s, 0.4), vec![[false; 2]; 2]);
    }

    #[test]
    fn matching_examples() {
        let s = cs(vec![[0.2, 0.0], [0.9, 0.0], [0.5, 0.0]], vec![[true, false]; 3]);
        assert_eq!(matching_pseudo_labels(&s), [Some(1), None]);
        let s = cs(vec![[0.5, 0.5], [0.5, 0.5]], vec![[true, true]; 2]);
        assert_eq!(matching_pseudo_labels(&s), [Some(0), Some(0)]);
        let s = cs(vec![[0.9, 0.1], [0.2, 0.8]], vec![[false, true], [true, false]]);
        assert_eq!(matching_pseudo_labels(&s), [Some(1), Some(0)]);
    }

    #[test]
    fn batch_without_valid_entries() {
        let (rho, labels) =
            batch_pseudo_labels(&[Some(cs(vec![[0.3, 0.1]], vec![[false; 2]])), None], 0.3).unwrap();
        assert_eq!(rho, None);
        assert_eq!(labels[0].as_ref().unwrap().contact, vec![[false; 2]]);
        assert_eq!(labels[0].as_ref().unwrap().matching, [None, None]);
        assert!(labels[1].is_none());
    }

    proptest! {
        #[test]
        fn positive_rate_bounded(
            vals in prop::collection::vec(-1.0f64..1.0, 1..200),
            gamma in 0.05f64..0.95,
        ) {
            let rho = percentile_threshold(&vals, gamma).unwrap();
            let above = vals.iter().filter(|v| **v > rho).count();
            let n = vals.len();
            let rank = (gamma * n as f64).ceil() as usize;
            // At most n - rank entries can exceed the rank-th smallest value.
            prop_assert!(above <= n - rank.max(1));
            let mut sorted = vals.clone();
            sorted.sort_by(f64::total_cmp);
            sorted.dedup();
            if sorted.len() == n {
                prop_assert_eq!(above, n - rank.max(1));
            }
        }

        #[test]
        fn matching_label_is_valid_and_permutation_equivariant(
            rows in prop::collection::vec(((-1.0f64..1.0, -1.0f64..1.0), (any::<bool>(), any::<bool>())), 1..12),
            rot in 0usize..12,
        ) {
            let values: Vec<[f64; 2]> = rows.iter().map(|((a, b), _)| [*a, *b]).collect();
            let valid: Vec<[bool; 2]> = rows.iter().map(|(_, (a, b))| [*a, *b]).collect();
            let s = cs(values.clone(), valid.clone());
            let h = matching_pseudo_labels(&s);
            for k in 0..2 {
                if let Some(i) = h[k] {
                    prop_assert!(valid[i][k]);
                } else {
                    prop_assert!(valid.iter().all(|v| !v[k]));
                }
            }
            let n = values.len();
            let r = rot % n;
            let perm: Vec<usize> = (0..n).map(|i| (i + r) % n).collect();
            let ps = cs(perm.iter().map(|&i| values[i]).collect(), perm.iter().map(|&i| valid[i]).collect());
            let ph = matching_pseudo_labels(&ps);
            for k in 0..2 {
                match (h[k], ph[k]) {
                    (Some(a), Some(b)) => prop_assert_eq!(values[a][k], values[perm[b]][k]),
                    (None, None) => {}
                    _ => prop_assert!(false),
                }
            }
        }
    }
}
