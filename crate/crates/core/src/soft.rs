//! Smoothed rank, sort and quantile-normalization operators.
//!
//! Each operator min-max rescales its input row onto `[0, 1]`, transports it
//! onto the anchor grid `y`, and applies the resulting plan:
//!
//! * rank:     `n / a * (P+ cumsum(b))`
//! * sort:     `(P-^T x) / b`
//! * quantile: `(P+ q) / a`
//!
//! `P+` has row sums `a` and `P-` has column sums `b` after any number of
//! iterations, so every output entry is a convex combination of its targets
//! and the operators are order preserving for every iteration count.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ot::{self, IterControl, Rescale, SinkhornOptions, TransportSolution};

/// Target measure of one feature: weights `b` on quantile values `q`, and the
/// anchor grid `y` the input is transported onto.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    b: Array1<f64>,
    q: Array1<f64>,
    y: Array1<f64>,
}

impl TargetSpec {
    pub fn new(b: Array1<f64>, q: Array1<f64>, y: Array1<f64>) -> Result<Self> {
        let spec = Self::relaxed(b, q, y)?;
        if spec.q.windows(2).into_iter().any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("quantiles q must be strictly increasing"));
        }
        Ok(spec)
    }

    /// Like [`TargetSpec::new`] but only requires `q` to be non-decreasing,
    /// so constant quantile vectors are accepted.
    pub fn relaxed(b: Array1<f64>, q: Array1<f64>, y: Array1<f64>) -> Result<Self> {
        if b.len() != q.len() || b.len() != y.len() {
            return Err(Error::invalid(format!(
                "target spec lengths differ: b {}, q {}, y {}",
                b.len(),
                q.len(),
                y.len()
            )));
        }
        // validates b and y
        ot::AnchorGrid::new(b.clone(), y.clone())?;
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("quantiles q must be finite"));
        }
        if q.windows(2).into_iter().any(|w| w[1] < w[0]) {
            return Err(Error::invalid("quantiles q must be non-decreasing"));
        }
        Ok(Self { b, q, y })
    }

    /// Uniform weights on the regular grid of `[0, 1]`.
    pub fn uniform(q: Array1<f64>) -> Result<Self> {
        let m = q.len();
        if m == 0 {
            return Err(Error::invalid("empty quantile vector"));
        }
        Self::new(Array1::from_elem(m, 1.0 / m as f64), q, ot::regular_grid(m))
    }

    pub fn b(&self) -> ArrayView1<'_, f64> {
        self.b.view()
    }

    pub fn q(&self) -> ArrayView1<'_, f64> {
        self.q.view()
    }

    pub fn y(&self) -> ArrayView1<'_, f64> {
        self.y.view()
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }
}

/// Operator output together with the transport it was computed from.
#[derive(Debug, Clone)]
pub struct SoftOpResult {
    pub output: Array1<f64>,
    pub solution: TransportSolution,
    pub rescale: Rescale,
    /// The input after rescaling onto `[0, 1]`.
    pub scaled: Array1<f64>,
}

/// Rescales `x`, then solves the transport onto `(b, y)`. Does not enforce
/// convergence.
pub(crate) fn transport(
    a: ArrayView1<f64>,
    x: ArrayView1<f64>,
    b: ArrayView1<f64>,
    y: ArrayView1<f64>,
    opts: &SinkhornOptions,
) -> Result<(TransportSolution, Rescale, Array1<f64>)> {
    if a.len() != x.len() {
        return Err(Error::invalid(format!(
            "{} weights for {} values",
            a.len(),
            x.len()
        )));
    }
    let (rescale, scaled) = Rescale::fit(x)?;
    let mu = ot::DiscreteMeasure::new(a.to_owned(), scaled.clone())?;
    let nu = ot::AnchorGrid::new(b.to_owned(), y.to_owned())?;
    let sol = ot::solve(&mu, &nu, opts)?;
    Ok((sol, rescale, scaled))
}

fn strict_transport(
    a: ArrayView1<f64>,
    x: ArrayView1<f64>,
    b: ArrayView1<f64>,
    y: ArrayView1<f64>,
    opts: &SinkhornOptions,
) -> Result<(TransportSolution, Rescale, Array1<f64>)> {
    let out = transport(a, x, b, y, opts)?;
    if let IterControl::Tolerance { .. } = opts.control {
        if !out.0.converged() {
            return Err(Error::MaxIterExceeded {
                iterations: out.0.iterations,
                residual: out.0.residual,
            });
        }
    }
    Ok(out)
}

/// `(P q) / a` for a plan with row sums `a`.
pub(crate) fn apply_quantiles(plan: &Array2<f64>, a: ArrayView1<f64>, q: ArrayView1<f64>) -> Array1<f64> {
    let mut out = plan.dot(&q);
    Zip::from(&mut out).and(&a).for_each(|o, &ai| *o /= ai);
    out
}

/// Soft ranks in `[0, n]`.
pub fn soft_rank(
    a: ArrayView1<f64>,
    x: ArrayView1<f64>,
    b: ArrayView1<f64>,
    y: ArrayView1<f64>,
    opts: &SinkhornOptions,
) -> Result<SoftOpResult> {
    let (solution, rescale, scaled) = strict_transport(a, x, b, y, opts)?;
    let n = x.len() as f64;
    let mut cum = b.to_owned();
    cum.accumulate_axis_inplace(Axis(0), |&prev, cur| *cur += prev);
    let mut output = apply_quantiles(&solution.plan, a, cum.view());
    output.mapv_inplace(|v| n * v);
    Ok(SoftOpResult {
        output,
        solution,
        rescale,
        scaled,
    })
}

/// Soft sorted values, one per anchor, as `b`-normalized averages of `x`.
pub fn soft_sort(
    a: ArrayView1<f64>,
    x: ArrayView1<f64>,
    b: ArrayView1<f64>,
    y: ArrayView1<f64>,
    opts: &SinkhornOptions,
) -> Result<SoftOpResult> {
    let (solution, rescale, scaled) = strict_transport(a, x, b, y, opts)?;
    let mut output = solution.plan_minus.t().dot(&x);
    Zip::from(&mut output).and(&b).for_each(|o, &bj| *o /= bj);
    Ok(SoftOpResult {
        output,
        solution,
        rescale,
        scaled,
    })
}

/// Soft quantile normalization of `x` (weights `a`) onto the target `spec`.
pub fn soft_quantile_normalize(
    a: ArrayView1<f64>,
    x: ArrayView1<f64>,
    spec: &TargetSpec,
    opts: &SinkhornOptions,
) -> Result<SoftOpResult> {
    let (solution, rescale, scaled) = strict_transport(a, x, spec.b(), spec.y(), opts)?;
    let output = apply_quantiles(&solution.plan, a, spec.q());
    Ok(SoftOpResult {
        output,
        solution,
        rescale,
        scaled,
    })
}

/// Applies [`soft_quantile_normalize`] to each row of `w` with uniform input
/// weights. Rows are independent and evaluated in parallel.
pub fn row_quantile_normalize(
    w: ArrayView2<f64>,
    specs: &[TargetSpec],
    opts: &SinkhornOptions,
) -> Result<Array2<f64>> {
    let (d, n) = w.dim();
    if specs.len() != d {
        return Err(Error::invalid(format!("{} specs for {d} rows", specs.len())));
    }
    if n == 0 {
        return Ok(Array2::zeros((d, 0)));
    }
    let a = Array1::from_elem(n, 1.0 / n as f64);
    let rows: Vec<Result<Array1<f64>>> = (0..d)
        .into_par_iter()
        .map(|i| {
            soft_quantile_normalize(a.view(), w.row(i), &specs[i], opts)
                .map(|r| r.output)
                .map_err(|e| e.at_row(i))
        })
        .collect();
    let mut out = Array2::zeros((d, n));
    for (i, row) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&row?);
    }
    Ok(out)
}
