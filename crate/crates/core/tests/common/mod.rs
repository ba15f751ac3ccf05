#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn simplex(rng: &mut impl Rng, len: usize) -> Array1<f64> {
    let mut w = Array1::from_shape_simple_fn(len, || 0.1 + rng.random::<f64>());
    let total = w.sum();
    w /= total;
    w
}

pub fn uniform(len: usize) -> Array1<f64> {
    Array1::from_elem(len, 1.0 / len as f64)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

pub fn increasing(rng: &mut impl Rng, len: usize) -> Array1<f64> {
    let mut q = Array1::from_shape_simple_fn(len, || 0.05 + rng.random::<f64>());
    q.accumulate_axis_inplace(ndarray::Axis(0), |&p, c| *c += p);
    q -= 1.0;
    q
}

/// Distinct values spread out on `[0, 1]`: a jittered regular grid in
/// random order.
pub fn spread(rng: &mut impl Rng, n: usize, jitter: f64) -> Array1<f64> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    let step = 1.0 / (n.max(2) - 1) as f64;
    Array1::from_iter(idx.into_iter().map(|i| (i as f64 + jitter * (2.0 * rng.random::<f64>() - 1.0)) * step))
}

/// 0-based rank of each entry; ties by position.
pub fn argsort_ranks(x: &Array1<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].partial_cmp(&x[j]).unwrap().then(i.cmp(&j)));
    let mut ranks = vec![0; x.len()];
    for (r, i) in order.into_iter().enumerate() {
        ranks[i] = r;
    }
    ranks
}

pub fn sorted(x: &Array1<f64>) -> Array1<f64> {
    let mut v = x.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Array1::from(v)
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
}

pub fn rel_err(approx: &Array1<f64>, reference: &Array1<f64>) -> f64 {
    let scale = reference.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1e-12);
    approx.iter().zip(reference).fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs())) / scale
}

pub fn central(step: f64, f: impl Fn(f64) -> f64) -> f64 {
    (f(step) - f(-step)) / (2.0 * step)
}
