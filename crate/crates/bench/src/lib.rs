//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wish_core::data::{encode_rle, RleMask};
use wish_core::numerics::{AdapterParams, Matrix};
use wish_core::synthgen::{generate_scenes, SynthConfig};
use wish_core::SampleBundle;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn adapter(dim: usize, seed: u64) -> AdapterParams {
    AdapterParams::init_uniform(dim, dim, 0.1, &mut rng(seed))
}

pub fn vector(dim: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..dim).map(|_| r.random_range(-1.0..1.0)).collect()
}

pub fn score_matrix(b: usize, seed: u64) -> Matrix {
    let mut r = rng(seed);
    Matrix::from_rows(b, b, (0..b * b).map(|_| r.random_range(-1.0..1.0)).collect())
        .expect("square")
}

/// A blobby mask: rows of random-length runs.
pub fn mask(width: u32, height: u32, seed: u64) -> RleMask {
    let mut r = rng(seed);
    let dense: Vec<bool> = (0..height)
        .flat_map(|_| {
            let lo = r.random_range(0..width);
            let hi = r.random_range(lo..=width);
            (0..width).map(move |x| x >= lo && x < hi)
        })
        .collect();
    encode_rle(&dense, width, height).expect("dims match")
}

pub fn scenes(n: usize, dim: usize) -> Vec<SampleBundle> {
    generate_scenes(&SynthConfig {
        num_samples: n,
        dim,
        ..SynthConfig::default()
    })
    .expect("default layout is feasible")
}
