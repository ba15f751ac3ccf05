use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::nmf::{nmf_init, unrolled_nmf, NmfTape};
use super::optim::Optimizer;
use super::qmf::{apply_map, inflate_rows, map_row, uniform_weights, RowForward};
use super::{check_data, row_ranges, FactorModel, LossCurve, Method, TrainConfig};
use crate::error::{Error, Result};
use crate::ot::{self, SinkhornOptions};
use crate::params::{FactorPrecursors, PrecursorSet};

/// Inner NMF starting factors; fixed for a given seed across outer steps.
fn inner_init(d: usize, n: usize, k: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    nmf_init(d, n, k, &mut rng)
}

fn deflate_rows(x: ArrayView2<f64>, set: &PrecursorSet, opts: &SinkhornOptions) -> Result<(Array2<f64>, Vec<RowForward>)> {
    let (d, n) = x.dim();
    let a = uniform_weights(n);
    let y = ot::regular_grid(set.m());
    let fwd: Vec<RowForward> = (0..d)
        .into_par_iter()
        .map(|i| map_row(x.row(i), set, i, a.view(), y.view(), opts).map_err(|e| e.at_row(i)))
        .collect::<Result<_>>()?;
    let mut xp = Array2::zeros((d, n));
    for (i, f) in fwd.iter().enumerate() {
        xp.row_mut(i).assign(&f.out);
    }
    Ok((xp, fwd))
}

/// `T'(x)`: the deflating map applied row by row.
pub fn deflate(x: ArrayView2<f64>, set: &PrecursorSet, opts: &SinkhornOptions) -> Result<Array2<f64>> {
    deflate_rows(x, set, opts).map(|r| r.0)
}

/// Forward pass of the bilevel model.
#[derive(Debug, Clone)]
pub struct QmfqEval {
    pub loss: f64,
    /// `T'(x)`.
    pub deflated: Array2<f64>,
    /// Inner NMF factors of the deflated data.
    pub u: Array2<f64>,
    pub v: Array2<f64>,
    /// Inner KL after each NMF iteration.
    pub inner: Vec<f64>,
}

/// Loss and gradients of the bilevel objective in both maps' precursors.
#[derive(Debug, Clone)]
pub struct QmfqGradient {
    pub eval: QmfqEval,
    pub inflate_weights: Array2<f64>,
    pub inflate_quantiles: Array2<f64>,
    pub deflate_weights: Array2<f64>,
    pub deflate_quantiles: Array2<f64>,
    pub skipped_rows: usize,
    pub sinkhorn_iterations: usize,
    pub solves: usize,
}

impl QmfqGradient {
    fn is_finite(&self) -> bool {
        self.eval.loss.is_finite()
            && [
                &self.inflate_weights,
                &self.inflate_quantiles,
                &self.deflate_weights,
                &self.deflate_quantiles,
            ]
            .iter()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

struct Forward {
    eval: QmfqEval,
    deflated_rows: Vec<RowForward>,
    tape: NmfTape,
}

fn forward(
    x: ArrayView2<f64>,
    inflate: &PrecursorSet,
    deflate: &PrecursorSet,
    config: &TrainConfig,
    keep: usize,
) -> Result<Forward> {
    let (d, n) = x.dim();
    if inflate.rows() != d || deflate.rows() != d {
        return Err(Error::invalid(format!(
            "maps have {} and {} rows for {d} features",
            inflate.rows(),
            deflate.rows()
        )));
    }
    let opts = config.sinkhorn();
    let (xp, deflated_rows) = deflate_rows(x, deflate, &opts)?;
    let (u0, v0) = inner_init(d, n, config.rank, config.seed);
    let (u, v, tape, inner) = unrolled_nmf(xp.view(), u0, v0, config.inner_iters, config.nmf_floor, keep)?;
    Ok(Forward {
        eval: QmfqEval {
            loss: 0.0,
            deflated: xp,
            u,
            v,
            inner,
        },
        deflated_rows,
        tape,
    })
}

/// Bilevel loss `sum_i KL(x_i, T_i(U V))` with `U V = NMF_k(T'(x))`.
pub fn qmfq_loss(
    x: ArrayView2<f64>,
    inflate: &PrecursorSet,
    deflate: &PrecursorSet,
    config: &TrainConfig,
) -> Result<QmfqEval> {
    let mut fwd = forward(x, inflate, deflate, config, 0)?;
    let rows: Vec<usize> = (0..x.nrows()).collect();
    let z = fwd.eval.u.dot(&fwd.eval.v);
    let res = inflate_rows(x, z.view(), inflate, &rows, &config.sinkhorn(), false)?;
    fwd.eval.loss = res.iter().map(|r| r.0).sum();
    Ok(fwd.eval)
}

/// Loss and gradient of the bilevel objective, differentiating through the
/// unrolled inner NMF and both quantile maps.
pub fn qmfq_loss_and_grad(
    x: ArrayView2<f64>,
    inflate: &PrecursorSet,
    deflate: &PrecursorSet,
    config: &TrainConfig,
) -> Result<QmfqGradient> {
    let keep = config.unroll_depth.unwrap_or(config.inner_iters).min(config.inner_iters);
    let Forward {
        mut eval,
        deflated_rows,
        tape,
    } = forward(x, inflate, deflate, config, keep)?;
    let (d, n) = x.dim();
    let opts = config.sinkhorn();
    let rows: Vec<usize> = (0..d).collect();
    let z = eval.u.dot(&eval.v);
    let res = inflate_rows(x, z.view(), inflate, &rows, &opts, true)?;

    let mut out = QmfqGradient {
        eval: eval.clone(),
        inflate_weights: Array2::zeros(inflate.weights.raw_dim()),
        inflate_quantiles: Array2::zeros(inflate.quantiles.raw_dim()),
        deflate_weights: Array2::zeros(deflate.weights.raw_dim()),
        deflate_quantiles: Array2::zeros(deflate.quantiles.raw_dim()),
        skipped_rows: 0,
        sinkhorn_iterations: 0,
        solves: 0,
    };
    let mut g = Array2::zeros((d, n));
    eval.loss = 0.0;
    for (i, (loss, cot, iters, solved)) in res.into_iter().enumerate() {
        eval.loss += loss;
        out.sinkhorn_iterations += iters;
        out.solves += usize::from(solved);
        match cot {
            Some(c) => {
                g.row_mut(i).assign(&c.input);
                out.inflate_weights.row_mut(i).assign(&c.weights);
                out.inflate_quantiles.row_mut(i).assign(&c.quantiles);
            }
            None => out.skipped_rows += 1,
        }
    }
    let ub = g.dot(&eval.v.t());
    let vb = eval.u.t().dot(&g);
    let xpb = tape.backward(eval.deflated.view(), &ub, &vb);

    let a = uniform_weights(n);
    let y = ot::regular_grid(deflate.m());
    let cots: Vec<_> = (0..d)
        .into_par_iter()
        .map(|i| {
            deflated_rows[i]
                .vjp(xpb.row(i), deflate, i, a.view(), y.view())
                .map_err(|e| e.at_row(i))
        })
        .collect::<Result<_>>()?;
    for (i, (cot, f)) in cots.into_iter().zip(&deflated_rows).enumerate() {
        out.sinkhorn_iterations += f.iterations();
        out.solves += usize::from(f.solved());
        match cot {
            Some(c) => {
                out.deflate_weights.row_mut(i).assign(&c.weights);
                out.deflate_quantiles.row_mut(i).assign(&c.quantiles);
            }
            None => out.skipped_rows += 1,
        }
    }
    out.eval = eval;
    Ok(out)
}

fn log_factors(u: &Array2<f64>, v: &Array2<f64>) -> FactorPrecursors {
    let tiny = f64::MIN_POSITIVE;
    FactorPrecursors {
        log_u: u.mapv(|t| t.max(tiny).ln()),
        log_v: v.mapv(|t| t.max(tiny).ln()),
    }
}

pub(crate) fn reconstruct_qmfq(model: &FactorModel, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (Some(inflate), Some(deflate)) = (&model.inflate, &model.deflate) else {
        return Err(Error::invalid("model lacks its quantile maps"));
    };
    let eval = qmfq_loss(x, inflate, deflate, &model.config)?;
    apply_map(eval.u.dot(&eval.v).view(), inflate, &model.config.sinkhorn())
}

/// Trains the bilevel model with full-batch steps; one epoch is one outer
/// step.
pub fn qmfq_train(x: ArrayView2<f64>, config: &TrainConfig) -> Result<(FactorModel, LossCurve)> {
    check_data(x)?;
    let (d, _) = x.dim();
    config.validate(d)?;
    let (s, t) = row_ranges(x);
    let mut inflate = PrecursorSet::pinned(s, t, config.quantiles)?;
    let mut deflate = PrecursorSet::free(d, config.quantiles)?;
    let mut opt = Optimizer::new(
        config.optimizer,
        config.learning_rate,
        &[
            inflate.weights.dim(),
            inflate.quantiles.dim(),
            deflate.weights.dim(),
            deflate.quantiles.dim(),
        ],
    );
    let start = Instant::now();
    let mut curve = LossCurve::default();
    let (mut iters, mut solves) = (0usize, 0usize);
    let mut last_eval = None;
    for epoch in 0..config.epochs {
        let g = qmfq_loss_and_grad(x, &inflate, &deflate, config)?;
        if epoch == 0 {
            curve.initial = g.eval.loss;
        } else {
            curve.epochs.push(g.eval.loss);
        }
        if !g.is_finite() {
            curve.diverged_at = Some(epoch);
            curve.epochs.pop();
            break;
        }
        curve.steps.push(g.eval.loss);
        curve.skipped_rows += g.skipped_rows;
        iters += g.sinkhorn_iterations;
        solves += g.solves;
        let backup = (inflate.clone(), deflate.clone());
        opt.step(
            &mut [
                &mut inflate.weights,
                &mut inflate.quantiles,
                &mut deflate.weights,
                &mut deflate.quantiles,
            ],
            &[
                config.train_weights.then_some(&g.inflate_weights),
                Some(&g.inflate_quantiles),
                config.train_weights.then_some(&g.deflate_weights),
                Some(&g.deflate_quantiles),
            ],
        );
        if deflate.quantiles.iter().any(|v| !(v.is_finite() && *v <= crate::params::MAX_EXP_PRECURSOR)) {
            (inflate, deflate) = backup;
            curve.diverged_at = Some(epoch);
            break;
        }
        curve.seconds.push(start.elapsed().as_secs_f64());
        last_eval = Some(g.eval);
    }
    if curve.diverged_at.is_none() {
        let eval = qmfq_loss(x, &inflate, &deflate, config)?;
        curve.epochs.push(eval.loss);
        curve.inner = eval.inner.clone();
        last_eval = Some(eval);
    }
    curve.seconds.truncate(curve.epochs.len());
    curve.mean_sinkhorn_iterations = if solves > 0 { iters as f64 / solves as f64 } else { 0.0 };
    let factors = match &last_eval {
        Some(e) => log_factors(&e.u, &e.v),
        None => {
            let e = qmfq_loss(x, &inflate, &deflate, config)?;
            log_factors(&e.u, &e.v)
        }
    };
    let model = FactorModel {
        method: Method::Qmfq,
        factors,
        inflate: Some(inflate),
        deflate: Some(deflate),
        config: config.clone(),
    };
    Ok((model, curve))
}
