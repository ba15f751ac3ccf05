use std::collections::VecDeque;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kl::kl_div;
use super::LossCurve;
use crate::error::{Error, Result};

/// Uniform `[0, 1)` factors from a seeded generator.
pub fn nmf_init(d: usize, n: usize, k: usize, rng: &mut impl Rng) -> (Array2<f64>, Array2<f64>) {
    let u = Array2::from_shape_simple_fn((d, k), || rng.random::<f64>());
    let v = Array2::from_shape_simple_fn((k, n), || rng.random::<f64>());
    (u, v)
}

fn ratio(x: ArrayView2<f64>, z: &Array2<f64>, floor: f64) -> Array2<f64> {
    Zip::from(x).and(z).map_collect(|&x, &z| x / z.max(floor))
}

fn floored(v: Array1<f64>, floor: f64) -> Array1<f64> {
    v.mapv(|s| s.max(floor))
}

fn u_update(x: ArrayView2<f64>, u: &Array2<f64>, v: &Array2<f64>, floor: f64) -> Array2<f64> {
    let q = ratio(x, &u.dot(v), floor);
    let num = q.dot(&v.t());
    let sigma = floored(v.sum_axis(Axis(1)), floor);
    let mut out = u * &num;
    out /= &sigma.insert_axis(Axis(0));
    out
}

fn v_update(x: ArrayView2<f64>, u: &Array2<f64>, v: &Array2<f64>, floor: f64) -> Array2<f64> {
    let q = ratio(x, &u.dot(v), floor);
    let num = u.t().dot(&q);
    let tau = floored(u.sum_axis(Axis(0)), floor);
    let mut out = v * &num;
    out /= &tau.insert_axis(Axis(1));
    out
}

/// One multiplicative KL update of `U`, then of `V` using the new `U`.
pub fn nmf_step(x: ArrayView2<f64>, u: &Array2<f64>, v: &Array2<f64>, floor: f64) -> (Array2<f64>, Array2<f64>) {
    let u2 = u_update(x, u, v, floor);
    let v2 = v_update(x, &u2, v, floor);
    (u2, v2)
}

fn check_inputs(x: ArrayView2<f64>, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("rank must be positive"));
    }
    if x.is_empty() {
        return Err(Error::invalid("empty data matrix"));
    }
    if let Some(v) = x.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::invalid(format!("NMF needs finite nonnegative data, found {v}")));
    }
    Ok(())
}

/// Lee-Seung multiplicative NMF under the generalized KL divergence, from
/// uniform factors drawn with `seed`. The curve records the KL after each
/// iteration.
pub fn nmf_multiplicative(
    x: ArrayView2<f64>,
    k: usize,
    iterations: usize,
    seed: u64,
    floor: f64,
) -> Result<(Array2<f64>, Array2<f64>, LossCurve)> {
    check_inputs(x, k)?;
    let (d, n) = x.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut u, mut v) = nmf_init(d, n, k, &mut rng);
    let start = Instant::now();
    let mut curve = LossCurve {
        initial: kl_div(x, u.dot(&v).view())?,
        ..Default::default()
    };
    for _ in 0..iterations {
        (u, v) = nmf_step(x, &u, &v, floor);
        let kl = kl_div(x, u.dot(&v).view())?;
        curve.steps.push(kl);
        curve.epochs.push(kl);
        curve.seconds.push(start.elapsed().as_secs_f64());
    }
    Ok((u, v, curve))
}

/// Stored iterates of an unrolled NMF run, for the reverse pass.
#[derive(Debug, Clone)]
pub struct NmfTape {
    floor: f64,
    /// `(U_t, V_t, U_{t+1})` for the retained iterations, oldest first.
    entries: VecDeque<(Array2<f64>, Array2<f64>, Array2<f64>)>,
}

impl NmfTape {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Pulls the cotangents of the final factors back to the data `x`
    /// through the retained iterations. Iterations dropped from the tape are
    /// treated as constants.
    pub fn backward(&self, x: ArrayView2<f64>, u_bar: &Array2<f64>, v_bar: &Array2<f64>) -> Array2<f64> {
        let mut xb = Array2::zeros(x.raw_dim());
        let mut ub = u_bar.clone();
        let mut vb = v_bar.clone();
        for (u, v, up) in self.entries.iter().rev() {
            (ub, vb) = backward_iter(x, u, v, up, &ub, &vb, self.floor, &mut xb);
        }
        xb
    }
}

fn masked_z_bar(qb: &Array2<f64>, x: ArrayView2<f64>, z: &Array2<f64>, floor: f64) -> Array2<f64> {
    Zip::from(qb).and(x).and(z).map_collect(|&qb, &x, &z| {
        if z >= floor {
            -qb * x / (z * z)
        } else {
            0.0
        }
    })
}

#[allow(clippy::too_many_arguments)]
fn backward_iter(
    x: ArrayView2<f64>,
    u: &Array2<f64>,
    v: &Array2<f64>,
    up: &Array2<f64>,
    up_bar_out: &Array2<f64>,
    vp_bar: &Array2<f64>,
    floor: f64,
    xb: &mut Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let (k, n) = v.dim();

    // V-step: V' = V * M / tau, M = U'^T Q', Q' = X / (U' V)
    let z2 = up.dot(v);
    let zf2 = z2.mapv(|z| z.max(floor));
    let q2 = &x / &zf2;
    let mm = up.t().dot(&q2);
    let tau_raw = up.sum_axis(Axis(0));
    let tau = floored(tau_raw.clone(), floor).insert_axis(Axis(1));
    let mut vb = vp_bar * &mm / &tau;
    let mmb = vp_bar * v / &tau;
    let mut upb = up_bar_out.clone();
    for kk in 0..k {
        if tau_raw[kk] >= floor {
            let t2 = tau[[kk, 0]] * tau[[kk, 0]];
            let s: f64 = (0..n).map(|j| vp_bar[[kk, j]] * v[[kk, j]] * mm[[kk, j]]).sum();
            upb.column_mut(kk).mapv_inplace(|e| e - s / t2);
        }
    }
    upb += &q2.dot(&mmb.t());
    let q2b = up.dot(&mmb);
    *xb += &(&q2b / &zf2);
    let z2b = masked_z_bar(&q2b, x, &z2, floor);
    upb += &z2b.dot(&v.t());
    vb += &up.t().dot(&z2b);

    // U-step: U' = U * N / sigma, N = Q V^T, Q = X / (U V)
    let z1 = u.dot(v);
    let zf1 = z1.mapv(|z| z.max(floor));
    let q1 = &x / &zf1;
    let nn = q1.dot(&v.t());
    let sigma_raw = v.sum_axis(Axis(1));
    let sigma = floored(sigma_raw.clone(), floor).insert_axis(Axis(0));
    let mut ub = &upb * &nn / &sigma;
    let nnb = &upb * u / &sigma;
    for kk in 0..k {
        if sigma_raw[kk] >= floor {
            let s2 = sigma[[0, kk]] * sigma[[0, kk]];
            let s: f64 = (0..u.nrows()).map(|i| upb[[i, kk]] * u[[i, kk]] * nn[[i, kk]]).sum();
            vb.row_mut(kk).mapv_inplace(|e| e - s / s2);
        }
    }
    let q1b = nnb.dot(v);
    vb += &nnb.t().dot(&q1);
    *xb += &(&q1b / &zf1);
    let z1b = masked_z_bar(&q1b, x, &z1, floor);
    ub += &z1b.dot(&v.t());
    vb += &u.t().dot(&z1b);
    (ub, vb)
}

/// Runs `iterations` multiplicative updates from `(u0, v0)`, recording the
/// KL after each one and keeping the last `keep` iterates for
/// [`NmfTape::backward`]. Fails with [`Error::InnerDivergence`] if the KL
/// rises by more than rounding noise.
pub fn unrolled_nmf(
    x: ArrayView2<f64>,
    u0: Array2<f64>,
    v0: Array2<f64>,
    iterations: usize,
    floor: f64,
    keep: usize,
) -> Result<(Array2<f64>, Array2<f64>, NmfTape, Vec<f64>)> {
    check_inputs(x, u0.ncols())?;
    let mut tape = NmfTape {
        floor,
        entries: VecDeque::with_capacity(keep.min(iterations)),
    };
    let mut curve = Vec::with_capacity(iterations);
    let mut prev = kl_div(x, u0.dot(&v0).view())?;
    let (mut u, mut v) = (u0, v0);
    for it in 0..iterations {
        let up = u_update(x, &u, &v, floor);
        let vp = v_update(x, &up, &v, floor);
        if keep > 0 {
            if tape.entries.len() == keep {
                tape.entries.pop_front();
            }
            tape.entries.push_back((u, v, up.clone()));
        }
        u = up;
        v = vp;
        let kl = kl_div(x, u.dot(&v).view())?;
        if !(kl <= prev + 1e-9 * prev.abs().max(1.0)) {
            return Err(Error::InnerDivergence {
                iteration: it + 1,
                before: prev,
                after: kl,
            });
        }
        curve.push(kl);
        prev = kl;
    }
    Ok((u, v, tape, curve))
}
