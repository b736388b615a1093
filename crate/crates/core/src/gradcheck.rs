//! Central finite-difference checks of every analytic gradient.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::alignment::{nce_loss, BatchScores, UnitSet};
use crate::data::{AdapterKind, ModelState, PerAdapter};
use crate::error::Result;
use crate::heads::{column_softmax, focal_contact_loss, matching_loss};
use crate::numerics::{dot, AdapterParams, Matrix};
use crate::synthgen::{generate_scene, SynthConfig};
use crate::trainer::{batch_objective, compute_pseudo_labels, BatchItem, SampleGeometry, TrainConfig};

/// Finite-difference step.
pub const STEP: f64 = 1e-6;
/// Largest accepted norm-wise relative error per tensor.
pub const TOLERANCE: f64 = 1e-4;
/// Gradient norms below this are compared in absolute terms.
const NORM_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub suites: Vec<SuiteResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            writeln!(
                f,
                "{:<4} {:<22} seeds={:<3} max_rel_err={:.3e}",
                if s.passed { "ok" } else { "FAIL" },
                s.name,
                s.seeds,
                s.max_rel_error
            )?;
        }
        write!(f, "{}", if self.passed() { "all gradients match" } else { "gradient mismatch" })
    }
}

/// `‖a - n‖ / max(‖a‖, ‖n‖)`, floored in the denominator.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = dot(analytic, analytic).sqrt().max(dot(numeric, numeric).sqrt());
    diff / scale.max(NORM_FLOOR)
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(
    x: &[f64],
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + STEP;
        let up = f(&probe)?;
        probe[i] = x[i] - STEP;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * STEP));
    }
    Ok(out)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn flatten(p: &AdapterParams) -> Vec<f64> {
    p.tensors().concat()
}

fn unflatten(like: &AdapterParams, flat: &[f64]) -> AdapterParams {
    let mut p = like.clone();
    let mut offset = 0;
    for t in p.tensors_mut() {
        let n = t.len();
        t.copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    p
}

/// Splits a flat vector into per-tensor slices shaped like `like`.
fn split_like<'a>(like: &AdapterParams, flat: &'a [f64]) -> Vec<&'a [f64]> {
    let mut out = Vec::new();
    let mut offset = 0;
    for t in like.tensors() {
        out.push(&flat[offset..offset + t.len()]);
        offset += t.len();
    }
    out
}

fn compare_adapter(like: &AdapterParams, analytic: &AdapterParams, numeric: &[f64]) -> f64 {
    analytic
        .tensors()
        .iter()
        .zip(split_like(like, numeric))
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

fn adapter_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d_v, d_h) = (5, 7);
    let mut params = AdapterParams::init_uniform(d_v, d_h, 0.5, &mut rng);
    for b in params.b1.iter_mut().chain(params.b2.iter_mut()) {
        *b = rng.random_range(-0.2..0.2);
    }
    let x = normal_vec(&mut rng, d_v);
    let up = normal_vec(&mut rng, d_v);
    let f = |p: &AdapterParams, x: &[f64]| -> Result<f64> { Ok(dot(&up, &p.forward(x)?)) };

    let mut grads = params.zeros_like();
    let dx = params.backward_into(&params.trace(&x)?, &up, &mut grads)?;
    let num_p = numeric_gradient(&flatten(&params), |flat| f(&unflatten(&params, flat), &x))?;
    let num_x = numeric_gradient(&x, |x| f(&params, x))?;
    Ok(compare_adapter(&params, &grads, &num_p).max(relative_error(&dx, &num_x)))
}

fn nce_scores_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.random_range(2..=5);
    let s: Vec<f64> = (0..b * b).map(|_| rng.random_range(-1.0..1.0)).collect();
    let tau = 0.07;
    let (_, grad) = nce_loss(&Matrix::from_rows(b, b, s.clone())?, tau)?;
    let num = numeric_gradient(&s, |v| Ok(nce_loss(&Matrix::from_rows(b, b, v.to_vec())?, tau)?.0))?;
    Ok(relative_error(&grad.data, &num))
}

fn nce_embedding_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 5;
    let b = 3;
    let objs: Vec<Vec<Vec<f64>>> = (0..b)
        .map(|_| (0..rng.random_range(1..=4)).map(|_| normal_vec(&mut rng, d)).collect())
        .collect();
    let phrs: Vec<Vec<Vec<f64>>> = (0..b)
        .map(|_| (0..2 * rng.random_range(1..=2)).map(|_| normal_vec(&mut rng, d)).collect())
        .collect();
    let loss = |objs: &[Vec<Vec<f64>>], phrs: &[Vec<Vec<f64>>]| -> Result<(f64, BatchScores, Matrix, Vec<UnitSet>, Vec<UnitSet>)> {
        let ou = objs.iter().map(|o| UnitSet::new(o)).collect::<Result<Vec<_>>>()?;
        let pu = phrs.iter().map(|p| UnitSet::new(p)).collect::<Result<Vec<_>>>()?;
        let scores = BatchScores::compute(&ou, &pu)?;
        let (l, g) = nce_loss(&scores.scores, 0.07)?;
        Ok((l, scores, g, ou, pu))
    };
    let (_, scores, g, ou, pu) = loss(&objs, &phrs)?;
    let (d_obj, d_phr) = scores.backward(&g, &ou, &pu);

    let flat = |sets: &[Vec<Vec<f64>>]| -> Vec<f64> { sets.iter().flatten().flatten().copied().collect() };
    let rebuild = |like: &[Vec<Vec<f64>>], v: &[f64]| -> Vec<Vec<Vec<f64>>> {
        let mut it = v.iter().copied();
        like.iter()
            .map(|s| s.iter().map(|e| e.iter().map(|_| it.next().unwrap()).collect()).collect())
            .collect()
    };
    let num_o = numeric_gradient(&flat(&objs), |v| Ok(loss(&rebuild(&objs, v), &phrs)?.0))?;
    let num_p = numeric_gradient(&flat(&phrs), |v| Ok(loss(&objs, &rebuild(&phrs, v))?.0))?;
    Ok(relative_error(&flat(&d_obj), &num_o).max(relative_error(&flat(&d_phr), &num_p)))
}

fn random_pairs(rng: &mut ChaCha8Rng, n: usize) -> (Vec<[f64; 2]>, Vec<[bool; 2]>) {
    let logits = (0..n)
        .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
        .collect();
    let mut valid: Vec<[bool; 2]> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
    valid[0] = [true, true];
    (logits, valid)
}

fn flat_pairs(v: &[[f64; 2]]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

fn unflat_pairs(v: &[f64]) -> Vec<[f64; 2]> {
    v.chunks(2).map(|c| [c[0], c[1]]).collect()
}

fn focal_case(seed: u64, theta: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=6);
    let (logits, valid) = random_pairs(&mut rng, n);
    let labels: Vec<[bool; 2]> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
    let f = |l: &[[f64; 2]]| -> Result<f64> {
        Ok(focal_contact_loss(l, &labels, &valid, theta)?.map_or(0.0, |(v, _)| v))
    };
    let (_, grad) = focal_contact_loss(&logits, &labels, &valid, theta)?.expect("one valid pair");
    let num = numeric_gradient(&flat_pairs(&logits), |v| f(&unflat_pairs(v)))?;
    Ok(relative_error(&flat_pairs(&grad), &num))
}

fn matching_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=6);
    let (logits, valid) = random_pairs(&mut rng, n);
    let mut labels = [None, None];
    for (k, label) in labels.iter_mut().enumerate() {
        let candidates: Vec<usize> = (0..n).filter(|&i| valid[i][k]).collect();
        *label = Some(candidates[rng.random_range(0..candidates.len())]);
    }
    let f = |l: &[[f64; 2]]| -> Result<f64> {
        let (p, _) = column_softmax(l, &valid, [true, true])?;
        Ok(matching_loss(&p, &valid, labels)?.sum)
    };
    let (p, _) = column_softmax(&logits, &valid, [true, true])?;
    let grad = matching_loss(&p, &valid, labels)?.grad;
    let num = numeric_gradient(&flat_pairs(&logits), |v| f(&unflat_pairs(v)))?;
    Ok(relative_error(&flat_pairs(&grad), &num))
}

fn total_objective_case(seed: u64) -> Result<f64> {
    let synth = SynthConfig {
        dim: 6,
        width: 16,
        height: 16,
        noise: 0.3,
        seed,
        ..SynthConfig::default()
    };
    let bundles = (0..4).map(|i| generate_scene(&synth, i)).collect::<Result<Vec<_>>>()?;
    let geometry = bundles.iter().map(SampleGeometry::of).collect::<Result<Vec<_>>>()?;
    let batch: Vec<BatchItem<'_>> = bundles
        .iter()
        .zip(&geometry)
        .map(|(bundle, geometry)| BatchItem { bundle, geometry })
        .collect();
    let config = TrainConfig {
        seed,
        init_scale: 0.3,
        ..TrainConfig::default()
    };
    let state = ModelState::init(synth.dim, &config)?;
    let (_, labels, _) = compute_pseudo_labels(&state, &batch, config.gamma)?;
    let mut grads = PerAdapter::from_fn(|k| state.adapters.get(k).zeros_like());
    batch_objective(&state, &batch, &labels, &config, Some(&mut grads))?;

    let mut worst: f64 = 0.0;
    for kind in AdapterKind::ALL {
        let like = state.adapters.get(kind).clone();
        let num = numeric_gradient(&flatten(&like), |flat| {
            let mut probe = state.clone();
            *probe.adapters.get_mut(kind) = unflatten(&like, flat);
            Ok(batch_objective(&probe, &batch, &labels, &config, None)?.total)
        })?;
        worst = worst.max(compare_adapter(&like, grads.get(kind), &num));
    }
    Ok(worst)
}

fn suite(name: &str, seeds: u64, mut case: impl FnMut(u64) -> Result<f64>) -> Result<SuiteResult> {
    let mut max_err: f64 = 0.0;
    for seed in 0..seeds {
        let err = case(seed)?;
        log::debug!("{name} seed {seed}: {err:.3e}");
        max_err = max_err.max(err);
    }
    Ok(SuiteResult {
        name: name.to_string(),
        seeds: seeds as usize,
        max_rel_error: max_err,
        passed: max_err <= TOLERANCE,
    })
}

/// Runs every suite at `seeds` seeds.
pub fn run_gradcheck(seeds: u64) -> Result<GradcheckReport> {
    Ok(GradcheckReport {
        suites: vec![
            suite("adapter", seeds, adapter_case)?,
            suite("nce_scores", seeds, nce_scores_case)?,
            suite("nce_embeddings", seeds, nce_embedding_case)?,
            suite("focal_theta0", seeds, |s| focal_case(s, 0.0))?,
            suite("focal_theta2", seeds, |s| focal_case(s, 2.0))?,
            suite("matching", seeds, matching_case)?,
            suite("total_all_adapters", seeds, total_objective_case)?,
        ],
    })
}
