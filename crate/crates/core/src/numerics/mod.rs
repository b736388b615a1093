//! Dense vector math, residual MLP adapters and the Adam optimizer.
//!
//! Everything here works in `f64`. Single precision only shows up at the
//! file boundary (see [`crate::data`]).

mod adam;
mod adapter;

pub use adam::{adam_step, AdamState};
pub use adapter::{adapter_backward, adapter_forward, AdapterParams, AdapterTrace, Matrix};

use std::ops::Deref;

use crate::error::{Result, WishError};

/// A finite embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Vecf(Vec<f64>);

impl Vecf {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        ensure_finite(&values, "vector")?;
        Ok(Self(values))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Vecf {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Vecf {
    type Error = WishError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(WishError::NonFinite(what))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Returns `a / ||a||` together with the norm.
pub fn normalized(a: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = norm(a);
    if !(n > 0.0) || !n.is_finite() {
        return Err(WishError::Domain("zero-norm vector".into()));
    }
    Ok((a.iter().map(|v| v / n).collect(), n))
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(WishError::Shape(format!(
            "cosine of vectors with dims {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(WishError::Domain("cosine similarity of zero-norm vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Gradient of `cos(a, b)` with respect to `a`, given the unit vectors and
/// the norm of `a`: `(b̂ - cos · â) / ||a||`.
pub(crate) fn cosine_grad(a_hat: &[f64], a_norm: f64, b_hat: &[f64], cos: f64) -> Vec<f64> {
    a_hat
        .iter()
        .zip(b_hat)
        .map(|(a, b)| (b - cos * a) / a_norm)
        .collect()
}

pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(WishError::Empty("softmax input"));
    }
    ensure_finite(v, "softmax input")?;
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(WishError::Empty("softmax input"));
    }
    ensure_finite(v, "softmax input")?;
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    Ok(v.iter().map(|x| x - lse).collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}
