//! Synthetic low-rank data pushed through a hard quantile normalization.
//!
//! All draws come from one `ChaCha8Rng` (rand_chacha 0.9) seeded with
//! `seed_from_u64(seed)`, in this order: `U*` row-major, `V*` column by
//! column, `Q*` row-major, then the noise row-major. Poisson draws use
//! sequential inversion, Dirichlet columns normalized Gamma draws.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub d: usize,
    pub n: usize,
    pub k: usize,
    /// Number of ground-truth quantiles per feature.
    pub m_star: usize,
    pub poisson_lambda: f64,
    pub dirichlet_alpha: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            d: 160,
            n: 80,
            k: 8,
            m_star: 80,
            poisson_lambda: 2.0,
            dirichlet_alpha: 0.5,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n == 0 || self.k == 0 || self.m_star == 0 {
            return Err(Error::invalid("dimensions must be positive"));
        }
        let params = [
            ("poisson_lambda", self.poisson_lambda),
            ("dirichlet_alpha", self.dirichlet_alpha),
            ("noise_sigma", self.noise_sigma),
        ];
        for (name, v) in params {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.dirichlet_alpha == 0.0 {
            return Err(Error::invalid("dirichlet_alpha must be positive"));
        }
        Ok(())
    }
}

/// Generated data and the ground truth behind it.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub x: Array2<f64>,
    pub u_star: Array2<f64>,
    pub v_star: Array2<f64>,
    /// Increasing ground-truth quantiles, `d x m_star`, uniform weights.
    pub q_star: Array2<f64>,
}

fn poisson(rng: &mut impl Rng, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let u: f64 = rng.random();
    let mut p = (-lambda).exp();
    let mut cdf = p;
    let mut k = 0.0;
    while u > cdf && p > 0.0 {
        k += 1.0;
        p *= lambda / k;
        cdf += p;
    }
    k
}

fn dirichlet(rng: &mut impl Rng, gamma: &Gamma<f64>, k: usize) -> Array1<f64> {
    loop {
        let mut draw = Array1::from_shape_simple_fn(k, || gamma.sample(rng));
        let total = draw.sum();
        if total > 0.0 {
            draw /= total;
            return draw;
        }
    }
}

/// Index of the quantile a value of rank `r` (0-based, among `n`) receives
/// under uniform weights on `m` quantiles.
pub fn hard_quantile_index(r: usize, n: usize, m: usize) -> usize {
    ((r + 1) * m).div_ceil(n) - 1
}

/// Replaces each entry of `w` by the quantile of its rank; ties are broken
/// by position.
pub fn hard_quantile_normalize(w: ArrayView1<f64>, q: ArrayView1<f64>) -> Array1<f64> {
    let n = w.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| w[i].total_cmp(&w[j]).then(i.cmp(&j)));
    let mut out = Array1::zeros(n);
    for (r, &i) in order.iter().enumerate() {
        out[i] = q[hard_quantile_index(r, n, q.len())];
    }
    out
}

/// Ground-truth quantile function of a row of `Q*` at level `tau` in (0, 1].
pub fn ground_truth_quantile(q: ArrayView1<f64>, tau: f64) -> f64 {
    let m = q.len();
    let j = ((tau * m as f64).ceil() as usize).clamp(1, m) - 1;
    q[j]
}

pub fn synth_generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let SynthConfig { d, n, k, m_star, .. } = *config;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let u_star = Array2::from_shape_simple_fn((d, k), || poisson(&mut rng, config.poisson_lambda));
    let gamma = Gamma::new(config.dirichlet_alpha, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut v_star = Array2::zeros((k, n));
    for j in 0..n {
        v_star.column_mut(j).assign(&dirichlet(&mut rng, &gamma, k));
    }
    let mut q_star = Array2::from_shape_simple_fn((d, m_star), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        z.exp()
    });
    for mut row in q_star.rows_mut() {
        row.accumulate_axis_inplace(ndarray::Axis(0), |&prev, cur| *cur += prev);
    }
    let w = u_star.dot(&v_star);
    let mut x = Array2::zeros((d, n));
    for i in 0..d {
        x.row_mut(i).assign(&hard_quantile_normalize(w.row(i), q_star.row(i)));
    }
    if config.noise_sigma > 0.0 {
        for v in x.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += (config.noise_sigma * z).max(0.0);
        }
    }
    Ok(SynthData {
        x,
        u_star,
        v_star,
        q_star,
    })
}
