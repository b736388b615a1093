//! Stage-1 alignment between adapted object embeddings and hand-specific
//! phrase embeddings.
//!
//! Phrase columns are always laid out as the `M` left-hand templates followed
//! by the `M` right-hand templates.

use crate::data::{HandSide, ModelState, SampleBundle};
use crate::error::{Result, WishError};
use crate::numerics::{cosine_grad, cosine_similarity, dot, log_softmax, normalized, Matrix};

/// Object-by-phrase cosine similarities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(WishError::Shape("ragged similarity rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            values: rows.into_iter().flatten().collect(),
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

/// Adapted embeddings of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedSample {
    pub objects: Vec<Vec<f64>>,
    pub hands: [Option<Vec<f64>>; 2],
    /// Left-hand phrase embeddings, then right-hand ones.
    pub phrases: Vec<Vec<f64>>,
}

/// Runs objects and hands through the visual adapter and phrase templates
/// through the textual adapter.
pub fn adapt_embeddings(state: &ModelState, bundle: &SampleBundle) -> Result<AdaptedSample> {
    let visual = &state.adapters.visual;
    let textual = &state.adapters.textual;
    let objects = bundle
        .objects
        .iter()
        .map(|o| visual.forward(&o.embedding))
        .collect::<Result<Vec<_>>>()?;
    let hand = |side: HandSide| {
        bundle
            .hand(side)
            .map(|h| visual.forward(&h.embedding))
            .transpose()
    };
    let hands = [hand(HandSide::Left)?, hand(HandSide::Right)?];
    let phrases = HandSide::ALL
        .iter()
        .flat_map(|&side| bundle.phrases.iter().map(move |p| p.embedding(side)))
        .map(|e| textual.forward(e))
        .collect::<Result<Vec<_>>>()?;
    Ok(AdaptedSample {
        objects,
        hands,
        phrases,
    })
}

pub fn similarity_matrix(objects: &[Vec<f64>], phrases: &[Vec<f64>]) -> Result<SimilarityMatrix> {
    let rows = objects
        .iter()
        .map(|w| {
            phrases
                .iter()
                .map(|q| cosine_similarity(w, q))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SimilarityMatrix {
        rows: objects.len(),
        cols: phrases.len(),
        values: rows.into_iter().flatten().collect(),
    })
}

/// Column-wise maximum: the best-matching object for every phrase.
pub fn best_match_scores(a: &SimilarityMatrix) -> Result<Vec<f64>> {
    if a.rows == 0 {
        return Err(WishError::Empty("no object proposals"));
    }
    Ok((0..a.cols)
        .map(|j| {
            (0..a.rows)
                .map(|i| a.get(i, j))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// Mean of the best-match scores over all phrase columns.
pub fn image_narration_score(a: &SimilarityMatrix) -> Result<f64> {
    if a.cols == 0 {
        return Err(WishError::Empty("no phrases"));
    }
    let b = best_match_scores(a)?;
    Ok(b.iter().sum::<f64>() / b.len() as f64)
}

/// Symmetric InfoNCE over a square score matrix whose diagonal holds the
/// matched pairs. Returns the loss and `∂loss/∂S`.
pub fn nce_loss(scores: &Matrix, tau: f64) -> Result<(f64, Matrix)> {
    if scores.rows != scores.cols {
        return Err(WishError::Shape(format!(
            "score matrix is {}x{}",
            scores.rows, scores.cols
        )));
    }
    if !(tau > 0.0) {
        return Err(WishError::Domain("temperature must be positive".into()));
    }
    let b = scores.rows;
    if b == 0 {
        return Err(WishError::Empty("score matrix"));
    }
    let bf = b as f64;
    let z: Vec<f64> = scores.data.iter().map(|s| s / tau).collect();
    let mut loss = 0.0;
    let mut dz = vec![0.0; b * b];
    for g in 0..b {
        let ls = log_softmax(&z[g * b..(g + 1) * b])?;
        loss -= ls[g] / bf;
        for h in 0..b {
            dz[g * b + h] += (ls[h].exp() - f64::from(u8::from(g == h))) / bf;
        }
    }
    for h in 0..b {
        let col: Vec<f64> = (0..b).map(|g| z[g * b + h]).collect();
        let ls = log_softmax(&col)?;
        loss -= ls[h] / bf;
        for g in 0..b {
            dz[g * b + h] += (ls[g].exp() - f64::from(u8::from(g == h))) / bf;
        }
    }
    let grad = Matrix::from_rows(b, b, dz.into_iter().map(|d| d / tau).collect())?;
    Ok((loss, grad))
}

/// Unit vectors and norms of a set of embeddings.
#[derive(Debug, Clone)]
pub(crate) struct UnitSet {
    pub hat: Vec<Vec<f64>>,
    pub norm: Vec<f64>,
}

impl UnitSet {
    pub fn new(vectors: &[Vec<f64>]) -> Result<Self> {
        let (hat, norm) = vectors
            .iter()
            .map(|v| normalized(v))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        Ok(Self { hat, norm })
    }
}

/// Image-narration scores for every (image, narration) pair in a batch,
/// with the per-column argmax kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct BatchScores {
    pub scores: Matrix,
    /// `winners[g * B + h][j]`: object of image g best matching phrase j of narration h.
    winners: Vec<Vec<usize>>,
    cosines: Vec<Vec<f64>>,
}

impl BatchScores {
    pub fn compute(objects: &[UnitSet], phrases: &[UnitSet]) -> Result<Self> {
        let b = objects.len();
        if phrases.len() != b {
            return Err(WishError::Shape("objects/phrases batch size".into()));
        }
        let mut scores = Matrix::zeros(b, b);
        let mut winners = Vec::with_capacity(b * b);
        let mut cosines = Vec::with_capacity(b * b);
        for (g, objs) in objects.iter().enumerate() {
            if objs.hat.is_empty() {
                return Err(WishError::Empty("no object proposals"));
            }
            for (h, phr) in phrases.iter().enumerate() {
                if phr.hat.is_empty() {
                    return Err(WishError::Empty("no phrases"));
                }
                let mut win = Vec::with_capacity(phr.hat.len());
                let mut cos = Vec::with_capacity(phr.hat.len());
                for q in &phr.hat {
                    let mut best = (0usize, f64::NEG_INFINITY);
                    for (i, w) in objs.hat.iter().enumerate() {
                        let c = dot(w, q);
                        if c > best.1 {
                            best = (i, c);
                        }
                    }
                    win.push(best.0);
                    cos.push(best.1);
                }
                scores.data[g * b + h] = cos.iter().sum::<f64>() / cos.len() as f64;
                winners.push(win);
                cosines.push(cos);
            }
        }
        Ok(Self {
            scores,
            winners,
            cosines,
        })
    }

    /// Propagates `∂loss/∂S` to the raw (unnormalized) object and phrase
    /// embeddings.
    pub fn backward(
        &self,
        d_scores: &Matrix,
        objects: &[UnitSet],
        phrases: &[UnitSet],
    ) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>) {
        let b = objects.len();
        let zeros = |sets: &[UnitSet]| -> Vec<Vec<Vec<f64>>> {
            sets.iter()
                .map(|s| s.hat.iter().map(|v| vec![0.0; v.len()]).collect())
                .collect()
        };
        let mut d_obj = zeros(objects);
        let mut d_phr = zeros(phrases);
        for g in 0..b {
            for h in 0..b {
                let ds = d_scores.data[g * b + h];
                if ds == 0.0 {
                    continue;
                }
                let pair = g * b + h;
                let per_col = ds / self.winners[pair].len() as f64;
                for (j, (&i, &c)) in self.winners[pair].iter().zip(&self.cosines[pair]).enumerate() {
                    let (w_hat, w_norm) = (&objects[g].hat[i], objects[g].norm[i]);
                    let (q_hat, q_norm) = (&phrases[h].hat[j], phrases[h].norm[j]);
                    let gw = cosine_grad(w_hat, w_norm, q_hat, c);
                    let gq = cosine_grad(q_hat, q_norm, w_hat, c);
                    for (d, v) in d_obj[g][i].iter_mut().zip(gw) {
                        *d += per_col * v;
                    }
                    for (d, v) in d_phr[h][j].iter_mut().zip(gq) {
                        *d += per_col * v;
                    }
                }
            }
        }
        (d_obj, d_phr)
    }
}
