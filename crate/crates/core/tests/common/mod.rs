#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semseg_core::losses::{Click, ClickSet};
use semseg_core::{Array3, ScoreMap};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_array(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, lo: f64, hi: f64) -> Array3 {
    let data = (0..h * w * c).map(|_| rng.random_range(lo..hi)).collect();
    Array3::from_vec(h, w, c, data).unwrap()
}

/// Softmax of random logits; every entry is comfortably positive.
pub fn random_scores(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ScoreMap {
    ScoreMap::softmax(&random_array(rng, h, w, c, -2.0, 2.0))
}

/// `n` distinct random clicks.
pub fn random_clicks(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, n: usize) -> ClickSet {
    let picks = rand::seq::index::sample(rng, h * w, n);
    let entries = picks
        .iter()
        .map(|p| Click {
            row: p / w,
            col: p % w,
            class: rng.random_range(0..c) as u8,
        })
        .collect();
    ClickSet::new(h, w, c, entries).unwrap()
}

/// Central differences of `f` at `x` along every coordinate.
pub fn numeric_gradient(x: &Array3, step: f64, f: impl Fn(&Array3) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.as_slice().len())
        .map(|i| {
            let orig = probe.as_slice()[i];
            probe.as_mut_slice()[i] = orig + step;
            let up = f(&probe);
            probe.as_mut_slice()[i] = orig - step;
            let down = f(&probe);
            probe.as_mut_slice()[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest coordinate error relative to the gradient's largest magnitude.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}
