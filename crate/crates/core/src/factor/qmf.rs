use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::kl::{kl_grad_row, kl_row};
use super::optim::Optimizer;
use super::{check_data, row_ranges, FactorModel, LossCurve, Method, TrainConfig};
use crate::error::{Error, Result};
use crate::implicit::{build_workspace, vjp_quantile};
use crate::ot::{self, CostSpec, Rescale, SinkhornOptions, TransportSolution};
use crate::params::{vjp_weights, FactorPrecursors, PrecursorSet};
use crate::soft::{apply_quantiles, transport};

/// Forward state of one row pushed through a quantile map.
pub(crate) struct RowForward {
    pub out: Array1<f64>,
    solved: Option<Solved>,
}

struct Solved {
    solution: TransportSolution,
    rescale: Rescale,
    scaled: Array1<f64>,
    b: Array1<f64>,
    q: Array1<f64>,
}

/// Cotangents of one row: input values, weight precursors, quantile
/// precursors.
pub(crate) struct RowCotangent {
    pub input: Array1<f64>,
    pub weights: Array1<f64>,
    pub quantiles: Array1<f64>,
}

pub(crate) fn uniform_weights(n: usize) -> Array1<f64> {
    Array1::from_elem(n, 1.0 / n as f64)
}

/// `T_i(w)`: soft quantile normalization of `w` onto row `i` of `set`.
pub(crate) fn map_row(
    w: ArrayView1<f64>,
    set: &PrecursorSet,
    i: usize,
    a: ArrayView1<f64>,
    y: ArrayView1<f64>,
    opts: &SinkhornOptions,
) -> Result<RowForward> {
    if set.is_constant_row(i) {
        let q = set.q_row(i)?;
        return Ok(RowForward {
            out: Array1::from_elem(w.len(), q[0]),
            solved: None,
        });
    }
    let b = set.b_row(i);
    let q = set.q_row(i)?;
    let (solution, rescale, scaled) = transport(a, w, b.view(), y, opts)?;
    let out = apply_quantiles(&solution.plan, a, q.view());
    Ok(RowForward {
        out,
        solved: Some(Solved {
            solution,
            rescale,
            scaled,
            b,
            q,
        }),
    })
}

impl RowForward {
    pub fn iterations(&self) -> usize {
        self.solved.as_ref().map_or(0, |s| s.solution.iterations)
    }

    pub fn solved(&self) -> bool {
        self.solved.is_some()
    }

    /// Pulls `h` back through the row map. `None` when the transport missed
    /// its tolerance, in which case the row is left out of the gradient.
    pub fn vjp(
        &self,
        h: ArrayView1<f64>,
        set: &PrecursorSet,
        i: usize,
        a: ArrayView1<f64>,
        y: ArrayView1<f64>,
    ) -> Result<Option<RowCotangent>> {
        let Some(s) = &self.solved else {
            return Ok(Some(RowCotangent {
                input: Array1::zeros(h.len()),
                weights: Array1::zeros(set.m()),
                quantiles: Array1::zeros(set.quantiles.ncols()),
            }));
        };
        if !s.solution.converged() {
            return Ok(None);
        }
        let ws = build_workspace(&s.solution, s.scaled.view(), y, CostSpec::SquaredDifference)?;
        let bundle = vjp_quantile(h, &ws, s.q.view(), a)?;
        Ok(Some(RowCotangent {
            input: s.rescale.vjp(s.scaled.view(), bundle.wrt_x.view()),
            weights: vjp_weights(bundle.wrt_b.view(), s.b.view()),
            quantiles: set.q_row_vjp(i, bundle.wrt_q.view()),
        }))
    }
}

/// Loss and gradients of a QMF step on a subset of rows. Gradient blocks
/// have full shape with zero rows outside the batch.
#[derive(Debug, Clone)]
pub struct QmfGradient {
    pub loss: f64,
    pub log_u: Array2<f64>,
    pub log_v: Array2<f64>,
    pub weights: Array2<f64>,
    pub quantiles: Array2<f64>,
    pub skipped_rows: usize,
    pub sinkhorn_iterations: usize,
    pub solves: usize,
}

impl QmfGradient {
    pub(crate) fn is_finite(&self) -> bool {
        self.loss.is_finite()
            && [&self.log_u, &self.log_v, &self.weights, &self.quantiles]
                .iter()
                .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Per-row KL of `x` against `T(u v)` on `rows`, with row cotangents in
/// `u v` when `grad` is set. Rows are evaluated in parallel and returned in
/// the order given.
#[allow(clippy::type_complexity)]
pub(crate) fn inflate_rows(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    inflate: &PrecursorSet,
    rows: &[usize],
    opts: &SinkhornOptions,
    grad: bool,
) -> Result<Vec<(f64, Option<RowCotangent>, usize, bool)>> {
    let n = x.ncols();
    let a = uniform_weights(n);
    let y = ot::regular_grid(inflate.m());
    rows.par_iter()
        .map(|&i| {
            let run = || -> Result<_> {
                let fwd = map_row(w.row(i), inflate, i, a.view(), y.view(), opts)?;
                let loss = kl_row(x.row(i), fwd.out.view());
                let cot = if grad {
                    let h = kl_grad_row(x.row(i), fwd.out.view());
                    fwd.vjp(h.view(), inflate, i, a.view(), y.view())?
                } else {
                    None
                };
                Ok((loss, cot, fwd.iterations(), fwd.solved()))
            };
            run().map_err(|e| e.at_row(i))
        })
        .collect()
}

/// QMF loss `sum_i KL(x_i, T_i(u v))` on `rows` and its gradient in the
/// log-factors and the precursors of `T`.
pub fn qmf_loss_and_grad(
    x: ArrayView2<f64>,
    factors: &FactorPrecursors,
    inflate: &PrecursorSet,
    rows: &[usize],
    opts: &SinkhornOptions,
) -> Result<QmfGradient> {
    let u = factors.u();
    let v = factors.v();
    check_shapes(x, &u, &v, inflate)?;
    let mut batch_u = Array2::zeros((rows.len(), u.ncols()));
    for (r, &i) in rows.iter().enumerate() {
        batch_u.row_mut(r).assign(&u.row(i));
    }
    let w_batch = batch_u.dot(&v);
    // rows of w_batch are indexed by batch position; remap x and the set
    let x_batch = x.select(Axis(0), rows);
    let set_batch = select_rows(inflate, rows);
    let positions: Vec<usize> = (0..rows.len()).collect();
    let results = inflate_rows(x_batch.view(), w_batch.view(), &set_batch, &positions, opts, true)?;

    let (d, k, n, m) = (x.nrows(), u.ncols(), x.ncols(), inflate.m());
    let mut g = Array2::zeros((rows.len(), n));
    let mut out = QmfGradient {
        loss: 0.0,
        log_u: Array2::zeros((d, k)),
        log_v: Array2::zeros((k, n)),
        weights: Array2::zeros((d, m)),
        quantiles: Array2::zeros(inflate.quantiles.raw_dim()),
        skipped_rows: 0,
        sinkhorn_iterations: 0,
        solves: 0,
    };
    for (r, (loss, cot, iters, solved)) in results.into_iter().enumerate() {
        let i = rows[r];
        out.loss += loss;
        out.sinkhorn_iterations += iters;
        out.solves += usize::from(solved);
        match cot {
            Some(c) => {
                g.row_mut(r).assign(&c.input);
                out.weights.row_mut(i).assign(&c.weights);
                out.quantiles.row_mut(i).assign(&c.quantiles);
            }
            None => out.skipped_rows += 1,
        }
    }
    let gu = g.dot(&v.t()) * &batch_u;
    for (r, &i) in rows.iter().enumerate() {
        out.log_u.row_mut(i).assign(&gu.row(r));
    }
    out.log_v = batch_u.t().dot(&g) * &v;
    Ok(out)
}

fn select_rows(set: &PrecursorSet, rows: &[usize]) -> PrecursorSet {
    use crate::params::QuantileMap;
    PrecursorSet {
        weights: set.weights.select(Axis(0), rows),
        quantiles: set.quantiles.select(Axis(0), rows),
        map: match &set.map {
            QuantileMap::Pinned { s, t } => QuantileMap::Pinned {
                s: s.select(Axis(0), rows),
                t: t.select(Axis(0), rows),
            },
            QuantileMap::Free => QuantileMap::Free,
        },
    }
}

fn check_shapes(x: ArrayView2<f64>, u: &Array2<f64>, v: &Array2<f64>, set: &PrecursorSet) -> Result<()> {
    let (d, n) = x.dim();
    if u.nrows() != d || v.ncols() != n || u.ncols() != v.nrows() || set.rows() != d {
        return Err(Error::invalid(format!(
            "shapes do not match: x {d}x{n}, u {:?}, v {:?}, map rows {}",
            u.dim(),
            v.dim(),
            set.rows()
        )));
    }
    Ok(())
}

/// `sum_i KL(x_i, T_i(u v))` for factors given directly.
pub fn qmf_objective(
    x: ArrayView2<f64>,
    u: &Array2<f64>,
    v: &Array2<f64>,
    inflate: &PrecursorSet,
    opts: &SinkhornOptions,
) -> Result<f64> {
    check_shapes(x, u, v, inflate)?;
    let w = u.dot(v);
    let rows: Vec<usize> = (0..x.nrows()).collect();
    let results = inflate_rows(x, w.view(), inflate, &rows, opts, false)?;
    Ok(results.iter().map(|r| r.0).sum())
}

/// Full-data QMF loss of a trained model.
pub fn qmf_loss(x: ArrayView2<f64>, model: &FactorModel) -> Result<f64> {
    let inflate = model
        .inflate
        .as_ref()
        .ok_or_else(|| Error::invalid("model has no quantile map"))?;
    qmf_objective(x, &model.factors.u(), &model.factors.v(), inflate, &model.config.sinkhorn())
}

pub(crate) fn apply_map(w: ArrayView2<f64>, set: &PrecursorSet, opts: &SinkhornOptions) -> Result<Array2<f64>> {
    let (d, n) = w.dim();
    let a = uniform_weights(n);
    let y = ot::regular_grid(set.m());
    let rows: Vec<Result<Array1<f64>>> = (0..d)
        .into_par_iter()
        .map(|i| {
            map_row(w.row(i), set, i, a.view(), y.view(), opts)
                .map(|f| f.out)
                .map_err(|e| e.at_row(i))
        })
        .collect();
    let mut out = Array2::zeros((d, n));
    for (i, row) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&row?);
    }
    Ok(out)
}

pub(crate) fn reconstruct_qmf(model: &FactorModel) -> Result<Array2<f64>> {
    let inflate = model
        .inflate
        .as_ref()
        .ok_or_else(|| Error::invalid("model has no quantile map"))?;
    let w = model.factors.u().dot(&model.factors.v());
    apply_map(w.view(), inflate, &model.config.sinkhorn())
}

/// Log-normal factor initialization with `E[exp] = 1/2`.
pub(crate) fn init_log_factors(d: usize, n: usize, k: usize, rng: &mut ChaCha8Rng) -> FactorPrecursors {
    let sd = 0.5;
    let normal = Normal::new(0.5f64.ln() - sd * sd / 2.0, sd).expect("valid normal");
    let log_u = Array2::from_shape_simple_fn((d, k), || normal.sample(rng));
    let log_v = Array2::from_shape_simple_fn((k, n), || normal.sample(rng));
    FactorPrecursors { log_u, log_v }
}

/// Trains QMF with mini-batches of features. Per-epoch losses are full-data
/// KL values after the epoch's updates.
pub fn qmf_train(x: ArrayView2<f64>, config: &TrainConfig) -> Result<(FactorModel, LossCurve)> {
    check_data(x)?;
    let (d, n) = x.dim();
    config.validate(d)?;
    let opts = config.sinkhorn();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut factors = init_log_factors(d, n, config.rank, &mut rng);
    let (s, t) = row_ranges(x);
    let mut inflate = PrecursorSet::pinned(s, t, config.quantiles)?;
    let mut opt = Optimizer::new(
        config.optimizer,
        config.learning_rate,
        &[
            factors.log_u.dim(),
            factors.log_v.dim(),
            inflate.weights.dim(),
            inflate.quantiles.dim(),
        ],
    );

    let batch = config.batch(d);
    let full = batch == d;
    let start = Instant::now();
    let mut curve = LossCurve {
        initial: qmf_objective(x, &factors.u(), &factors.v(), &inflate, &opts)?,
        ..Default::default()
    };
    let (mut iters, mut solves) = (0usize, 0usize);
    let mut order: Vec<usize> = (0..d).collect();
    'epochs: for epoch in 0..config.epochs {
        if !full {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let mut rows = chunk.to_vec();
            rows.sort_unstable();
            let g = qmf_loss_and_grad(x, &factors, &inflate, &rows, &opts)?;
            if full && epoch > 0 {
                curve.epochs.push(g.loss);
            }
            if !g.is_finite() {
                curve.diverged_at = Some(epoch);
                if full && epoch > 0 {
                    curve.epochs.pop();
                }
                break 'epochs;
            }
            curve.steps.push(g.loss);
            curve.skipped_rows += g.skipped_rows;
            iters += g.sinkhorn_iterations;
            solves += g.solves;
            let backup = (factors.clone(), inflate.clone());
            opt.step(
                &mut [
                    &mut factors.log_u,
                    &mut factors.log_v,
                    &mut inflate.weights,
                    &mut inflate.quantiles,
                ],
                &[
                    Some(&g.log_u),
                    Some(&g.log_v),
                    config.train_weights.then_some(&g.weights),
                    Some(&g.quantiles),
                ],
            );
            if factors.log_u.iter().chain(factors.log_v.iter()).any(|v| !v.is_finite() || *v > 700.0) {
                (factors, inflate) = backup;
                curve.diverged_at = Some(epoch);
                break 'epochs;
            }
        }
        curve.seconds.push(start.elapsed().as_secs_f64());
        if !full {
            let loss = qmf_objective(x, &factors.u(), &factors.v(), &inflate, &opts)?;
            if !loss.is_finite() {
                curve.diverged_at = Some(epoch);
                break;
            }
            curve.epochs.push(loss);
        }
    }
    if full && curve.diverged_at.is_none() {
        curve.epochs.push(qmf_objective(x, &factors.u(), &factors.v(), &inflate, &opts)?);
    }
    curve.seconds.truncate(curve.epochs.len());
    curve.mean_sinkhorn_iterations = if solves > 0 { iters as f64 / solves as f64 } else { 0.0 };
    let model = FactorModel {
        method: Method::Qmf,
        factors,
        inflate: Some(inflate),
        deflate: None,
        config: config.clone(),
    };
    Ok((model, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy() -> Array2<f64> {
        array![
            [0.1, 2.0, 0.5, 1.5, 0.0],
            [3.0, 3.0, 3.0, 3.0, 3.0],
            [0.4, 0.2, 1.0, 0.9, 0.3],
            [1.0, 0.0, 0.0, 2.5, 0.7]
        ]
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = toy();
        let opts = SinkhornOptions::tolerance(0.05, 1e-13, 100_000);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let factors = init_log_factors(4, 5, 2, &mut rng);
        let (s, t) = row_ranges(x.view());
        let mut set = PrecursorSet::pinned(s, t, 4).unwrap();
        set.weights = Array2::from_shape_fn((4, 4), |(i, j)| 0.1 * ((i * 4 + j) as f64).sin());
        set.quantiles = Array2::from_shape_fn((4, 3), |(i, j)| 0.2 * ((i * 3 + j) as f64).cos());
        let rows = [0, 1, 3];
        let g = qmf_loss_and_grad(x.view(), &factors, &set, &rows, &opts).unwrap();
        assert_eq!(g.skipped_rows, 0);
        let loss = |f: &FactorPrecursors, p: &PrecursorSet| qmf_loss_and_grad(x.view(), f, p, &rows, &opts).unwrap().loss;
        let h = 1e-6;
        let check = |fd: f64, an: f64, what: &str| {
            assert!((fd - an).abs() < 1e-5 * fd.abs().max(1.0), "{what}: fd {fd} vs {an}");
        };
        for (i, kk) in [(0, 0), (0, 1), (3, 1), (2, 0)] {
            let mut up = factors.clone();
            up.log_u[[i, kk]] += h;
            let mut dn = factors.clone();
            dn.log_u[[i, kk]] -= h;
            check((loss(&up, &set) - loss(&dn, &set)) / (2.0 * h), g.log_u[[i, kk]], "log_u");
        }
        for (kk, j) in [(0, 0), (1, 4), (1, 2)] {
            let mut up = factors.clone();
            up.log_v[[kk, j]] += h;
            let mut dn = factors.clone();
            dn.log_v[[kk, j]] -= h;
            check((loss(&up, &set) - loss(&dn, &set)) / (2.0 * h), g.log_v[[kk, j]], "log_v");
        }
        for (i, j) in [(0, 0), (0, 3), (3, 2)] {
            let mut up = set.clone();
            up.weights[[i, j]] += h;
            let mut dn = set.clone();
            dn.weights[[i, j]] -= h;
            check((loss(&factors, &up) - loss(&factors, &dn)) / (2.0 * h), g.weights[[i, j]], "weights");
        }
        for (i, j) in [(0, 0), (3, 1), (3, 2)] {
            let mut up = set.clone();
            up.quantiles[[i, j]] += h;
            let mut dn = set.clone();
            dn.quantiles[[i, j]] -= h;
            check((loss(&factors, &up) - loss(&factors, &dn)) / (2.0 * h), g.quantiles[[i, j]], "quantiles");
        }
        // the constant row contributes nothing
        assert!(g.weights.row(1).iter().all(|v| *v == 0.0));
        assert!(g.log_u.row(2).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_rows_are_reproduced() {
        let x = toy();
        let config = TrainConfig {
            rank: 2,
            quantiles: 4,
            epochs: 3,
            epsilon: 0.05,
            ..Default::default()
        };
        let (model, curve) = qmf_train(x.view(), &config).unwrap();
        assert_eq!(curve.epochs.len(), 3);
        let z = reconstruct_qmf(&model).unwrap();
        assert!(z.row(1).iter().all(|v| *v == 3.0));
    }
}
