//! Entropic optimal transport between a weighted value array and an ordered
//! anchor grid.
//!
//! Two solvers are provided. [`sinkhorn_scaling`] runs a fixed number of
//! multiplicative scaling iterations and keeps both the last and the
//! second-to-last row scaling, so that both plan variants are available:
//!
//! * `plan_plus  = diag(u_l)     K diag(v_l)` has row sums equal to `a`,
//! * `plan_minus = diag(u_{l-1}) K diag(v_l)` has column sums equal to `b`.
//!
//! [`log_sinkhorn`] iterates on the dual potentials `(f, g)` with soft-min
//! updates and stops once the column marginal of the plan is within `rho`
//! (L1 norm) of `b`. [`solve`] picks between the two forms depending on how
//! close the Gibbs kernel is to underflow.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Largest `max(C) / epsilon` for which [`solve`] uses the scaling form.
/// Beyond it the kernel and scalings get too close to the f64 range limits.
pub const SCALING_MAX_RATIO: f64 = 200.0;

/// Ground cost `c(x, y)`. Every variant is submodular in `(x, y)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CostSpec {
    /// `c(x, y) = (x - y)^2`, with cross derivative -2.
    #[default]
    SquaredDifference,
}

impl CostSpec {
    #[inline]
    pub fn cost(self, x: f64, y: f64) -> f64 {
        match self {
            CostSpec::SquaredDifference => (x - y) * (x - y),
        }
    }

    /// Partial derivative of the cost in its first argument.
    #[inline]
    pub fn dcost_dx(self, x: f64, y: f64) -> f64 {
        match self {
            CostSpec::SquaredDifference => 2.0 * (x - y),
        }
    }

    #[inline]
    pub fn cross_derivative(self, _x: f64, _y: f64) -> f64 {
        match self {
            CostSpec::SquaredDifference => -2.0,
        }
    }
}

fn check_probability(w: ArrayView1<f64>, what: &str) -> Result<()> {
    if w.is_empty() {
        return Err(Error::invalid(format!("{what}: empty weight vector")));
    }
    if let Some(bad) = w.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::invalid(format!(
            "{what}: weights must be finite and strictly positive, got {bad}"
        )));
    }
    let total: f64 = w.sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::invalid(format!(
            "{what}: weights sum to {total}, expected 1"
        )));
    }
    Ok(())
}

fn check_finite(v: ArrayView1<f64>, what: &str) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::invalid(format!("{what}: entry {i} is not finite"))),
        None => Ok(()),
    }
}

/// Weighted values of a one-dimensional empirical distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    weights: Array1<f64>,
    values: Array1<f64>,
}

impl DiscreteMeasure {
    pub fn new(weights: Array1<f64>, values: Array1<f64>) -> Result<Self> {
        if weights.len() != values.len() {
            return Err(Error::invalid(format!(
                "measure has {} weights but {} values",
                weights.len(),
                values.len()
            )));
        }
        check_probability(weights.view(), "measure")?;
        check_finite(values.view(), "measure values")?;
        Ok(Self { weights, values })
    }

    /// Uniform weights `1/n` on the given values.
    pub fn uniform(values: Array1<f64>) -> Result<Self> {
        let n = values.len();
        if n == 0 {
            return Err(Error::invalid("measure: empty value vector"));
        }
        Self::new(Array1::from_elem(n, 1.0 / n as f64), values)
    }

    pub fn weights(&self) -> ArrayView1<'_, f64> {
        self.weights.view()
    }

    pub fn values(&self) -> ArrayView1<'_, f64> {
        self.values.view()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Weighted, strictly increasing anchor values the input is transported onto.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    weights: Array1<f64>,
    values: Array1<f64>,
}

impl AnchorGrid {
    pub fn new(weights: Array1<f64>, values: Array1<f64>) -> Result<Self> {
        if weights.len() != values.len() {
            return Err(Error::invalid(format!(
                "anchor grid has {} weights but {} values",
                weights.len(),
                values.len()
            )));
        }
        check_probability(weights.view(), "anchor grid")?;
        check_finite(values.view(), "anchor values")?;
        if values.windows(2).into_iter().any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("anchor values must be strictly increasing"));
        }
        Ok(Self { weights, values })
    }

    /// Anchors on the regular grid of `[0, 1]` carrying the given weights.
    pub fn regular(weights: Array1<f64>) -> Result<Self> {
        let values = regular_grid(weights.len());
        Self::new(weights, values)
    }

    pub fn uniform(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("anchor grid: m must be positive"));
        }
        Self::regular(Array1::from_elem(m, 1.0 / m as f64))
    }

    pub fn weights(&self) -> ArrayView1<'_, f64> {
        self.weights.view()
    }

    pub fn values(&self) -> ArrayView1<'_, f64> {
        self.values.view()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `m` equally spaced points from 0 to 1 (`[0]` when `m == 1`).
pub fn regular_grid(m: usize) -> Array1<f64> {
    if m <= 1 {
        return Array1::zeros(m);
    }
    Array1::from_shape_fn(m, |j| j as f64 / (m - 1) as f64)
}

/// `C[i][j] = c(x_i, y_j)`.
pub fn cost_matrix(x: ArrayView1<f64>, y: ArrayView1<f64>, spec: CostSpec) -> Result<Array2<f64>> {
    check_finite(x, "x")?;
    check_finite(y, "y")?;
    Ok(Array2::from_shape_fn((x.len(), y.len()), |(i, j)| {
        spec.cost(x[i], y[j])
    }))
}

/// Row-wise soft-min `-eps * log(sum_j exp(-A[i][j] / eps))`, evaluated with
/// the row maximum of `-A / eps` factored out.
pub fn softmin_eps(a: ArrayView2<f64>, epsilon: f64) -> Array1<f64> {
    a.rows()
        .into_iter()
        .map(|row| {
            let top = row.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(-v / epsilon));
            if top == f64::NEG_INFINITY {
                return f64::INFINITY;
            }
            let s: f64 = row.iter().map(|&v| (-v / epsilon - top).exp()).sum();
            -epsilon * (top + s.ln())
        })
        .collect()
}

/// Iteration budget of a Sinkhorn run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum IterControl {
    /// Exactly this many iterations, whatever the residual.
    Fixed(usize),
    /// Iterate until the L1 column residual drops below `rho`.
    Tolerance { rho: f64, max_iter: usize },
}

impl Default for IterControl {
    fn default() -> Self {
        IterControl::Tolerance {
            rho: 1e-6,
            max_iter: 5000,
        }
    }
}

/// Regularization strength, iteration control and ground cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornOptions {
    pub epsilon: f64,
    pub control: IterControl,
    #[serde(default)]
    pub cost: CostSpec,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self::new(0.01, IterControl::default())
    }
}

impl SinkhornOptions {
    pub fn new(epsilon: f64, control: IterControl) -> Self {
        Self {
            epsilon,
            control,
            cost: CostSpec::SquaredDifference,
        }
    }

    pub fn tolerance(epsilon: f64, rho: f64, max_iter: usize) -> Self {
        Self::new(epsilon, IterControl::Tolerance { rho, max_iter })
    }

    pub fn fixed(epsilon: f64, iterations: usize) -> Self {
        Self::new(epsilon, IterControl::Fixed(iterations))
    }
}

/// Scalings after `l` iterations of the scaling-form Sinkhorn loop.
#[derive(Debug, Clone)]
pub struct ScalingState {
    pub u: Array1<f64>,
    pub u_prev: Array1<f64>,
    pub v: Array1<f64>,
    pub kernel: Array2<f64>,
    pub epsilon: f64,
    pub iterations: usize,
}

fn scale_kernel(u: &Array1<f64>, kernel: &Array2<f64>, v: &Array1<f64>) -> Array2<f64> {
    let mut p = kernel.clone();
    Zip::from(p.rows_mut()).and(u).for_each(|mut row, &ui| {
        Zip::from(&mut row).and(v).for_each(|pij, &vj| *pij *= ui * vj);
    });
    p
}

impl ScalingState {
    /// `diag(u_l) K diag(v_l)`; rows sum to `a`.
    pub fn plan_plus(&self) -> Array2<f64> {
        scale_kernel(&self.u, &self.kernel, &self.v)
    }

    /// `diag(u_{l-1}) K diag(v_l)`; columns sum to `b`.
    pub fn plan_minus(&self) -> Array2<f64> {
        scale_kernel(&self.u_prev, &self.kernel, &self.v)
    }
}

fn gibbs_kernel(cost: &Array2<f64>, epsilon: f64) -> Result<Array2<f64>> {
    let kernel = cost.mapv(|c| (-c / epsilon).exp());
    if let Some(i) = kernel.rows().into_iter().position(|r| r.iter().all(|&k| k == 0.0)) {
        return Err(Error::Underflow(format!("kernel row {i} is identically zero")));
    }
    if let Some(j) = kernel
        .columns()
        .into_iter()
        .position(|c| c.iter().all(|&k| k == 0.0))
    {
        return Err(Error::Underflow(format!(
            "kernel column {j} is identically zero"
        )));
    }
    Ok(kernel)
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(())
}

fn usable_scaling(v: &Array1<f64>) -> bool {
    v.iter().all(|x| x.is_finite() && *x > 0.0)
}

/// Core scaling loop. With `rho = Some(_)` it stops as soon as the column
/// residual of `plan_plus` falls below `rho`; the residual comes for free
/// from the `K^T u` product of the next iteration.
fn scaling_loop(
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    kernel: Array2<f64>,
    epsilon: f64,
    max_iter: usize,
    rho: Option<f64>,
) -> Result<(ScalingState, f64)> {
    let n = a.len();
    let mut u = Array1::<f64>::ones(n);
    let mut u_prev = u.clone();
    let mut v = Array1::<f64>::ones(b.len());
    let mut iterations = 0;
    let mut ktu = kernel.t().dot(&u);
    let residual = loop {
        if iterations > 0 {
            let residual = Zip::from(&v)
                .and(&ktu)
                .and(b)
                .fold(0.0, |acc, &vj, &kj, &bj| acc + (vj * kj - bj).abs());
            let done = match rho {
                Some(r) => residual < r || iterations >= max_iter,
                None => iterations >= max_iter,
            };
            if done {
                break residual;
            }
        }
        v = &b / &ktu;
        if !usable_scaling(&v) {
            return Err(Error::Underflow(format!(
                "column scaling left the f64 range at iteration {}",
                iterations + 1
            )));
        }
        let kv = kernel.dot(&v);
        u_prev = std::mem::replace(&mut u, &a / &kv);
        if !usable_scaling(&u) {
            return Err(Error::Underflow(format!(
                "row scaling left the f64 range at iteration {}",
                iterations + 1
            )));
        }
        iterations += 1;
        ktu = kernel.t().dot(&u);
    };
    Ok((
        ScalingState {
            u,
            u_prev,
            v,
            kernel,
            epsilon,
            iterations,
        },
        residual,
    ))
}

/// Runs exactly `iterations` scaling iterations starting from `u_0 = 1`.
pub fn sinkhorn_scaling(
    mu: &DiscreteMeasure,
    nu: &AnchorGrid,
    cost: CostSpec,
    epsilon: f64,
    iterations: usize,
) -> Result<ScalingState> {
    check_epsilon(epsilon)?;
    if iterations == 0 {
        return Err(Error::invalid("at least one Sinkhorn iteration is required"));
    }
    let c = cost_matrix(mu.values(), nu.values(), cost)?;
    let kernel = gibbs_kernel(&c, epsilon)?;
    scaling_loop(mu.weights(), nu.weights(), kernel, epsilon, iterations, None).map(|(s, _)| s)
}

/// Converged (or iteration-capped) entropic transport between `mu` and `nu`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransportSolution {
    /// Row potential after the last update.
    pub f: Array1<f64>,
    /// Row potential before the last update; pairs with `g` into `plan_minus`.
    pub f_minus: Array1<f64>,
    pub g: Array1<f64>,
    /// `exp((f + g - C) / eps)`; rows sum to `a`.
    pub plan: Array2<f64>,
    /// `exp((f_minus + g - C) / eps)`; columns sum to `b`.
    pub plan_minus: Array2<f64>,
    pub epsilon: f64,
    /// L1 distance between the column sums of `plan` and `b`.
    pub residual: f64,
    pub iterations: usize,
    /// Requested tolerance, `None` for fixed-iteration runs.
    pub tolerance: Option<f64>,
}

impl TransportSolution {
    pub fn plan_plus(&self) -> &Array2<f64> {
        &self.plan
    }

    pub fn converged(&self) -> bool {
        matches!(self.tolerance, Some(rho) if self.residual < rho)
    }

    fn from_scaling(state: ScalingState, residual: f64, tolerance: Option<f64>) -> Self {
        let eps = state.epsilon;
        let plan = state.plan_plus();
        let plan_minus = state.plan_minus();
        TransportSolution {
            f: state.u.mapv(|u| eps * u.ln()),
            f_minus: state.u_prev.mapv(|u| eps * u.ln()),
            g: state.v.mapv(|v| eps * v.ln()),
            plan,
            plan_minus,
            epsilon: eps,
            residual,
            iterations: state.iterations,
            tolerance,
        }
    }
}

/// `out_i = LSE_j((g_j - C_ij) / eps)`.
fn lse_rows(c: &Array2<f64>, g: &Array1<f64>, eps: f64, out: &mut Array1<f64>) {
    Zip::from(out).and(c.rows()).for_each(|o, row| {
        let mut top = f64::NEG_INFINITY;
        Zip::from(&row).and(g).for_each(|&cij, &gj| top = top.max((gj - cij) / eps));
        let mut s = 0.0;
        Zip::from(&row).and(g).for_each(|&cij, &gj| s += ((gj - cij) / eps - top).exp());
        *o = top + s.ln();
    });
}

/// `out_j = LSE_i((f_i - C_ij) / eps)`.
fn lse_cols(c: &Array2<f64>, f: &Array1<f64>, eps: f64, top: &mut Array1<f64>, out: &mut Array1<f64>) {
    top.fill(f64::NEG_INFINITY);
    for (row, &fi) in c.rows().into_iter().zip(f) {
        Zip::from(&mut *top).and(&row).for_each(|t, &cij| *t = t.max((fi - cij) / eps));
    }
    out.fill(0.0);
    for (row, &fi) in c.rows().into_iter().zip(f) {
        Zip::from(&mut *out)
            .and(&*top)
            .and(&row)
            .for_each(|s, &t, &cij| *s += ((fi - cij) / eps - t).exp());
    }
    Zip::from(out).and(&*top).for_each(|s, &t| *s = t + s.ln());
}

fn gibbs_plan(c: &Array2<f64>, f: &Array1<f64>, g: &Array1<f64>, eps: f64) -> Array2<f64> {
    let mut p = Array2::zeros(c.raw_dim());
    Zip::from(p.rows_mut())
        .and(c.rows())
        .and(f)
        .for_each(|mut prow, crow, &fi| {
            Zip::from(&mut prow)
                .and(&crow)
                .and(g)
                .for_each(|pij, &cij, &gj| *pij = ((fi + gj - cij) / eps).exp());
        });
    p
}

/// Log-domain loop: `g <- eps log b + min_eps(C^T - f)`, then
/// `f <- eps log a + min_eps(C - g)`.
fn log_loop(
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    c: &Array2<f64>,
    epsilon: f64,
    max_iter: usize,
    rho: Option<f64>,
) -> TransportSolution {
    let (n, m) = c.dim();
    let log_a = a.mapv(|v| epsilon * v.ln());
    let log_b = b.mapv(|v| epsilon * v.ln());
    let mut f = Array1::<f64>::zeros(n);
    let mut f_minus = f.clone();
    let mut g = Array1::<f64>::zeros(m);
    let mut col_lse = Array1::<f64>::zeros(m);
    let mut col_top = Array1::<f64>::zeros(m);
    let mut row_lse = Array1::<f64>::zeros(n);
    let mut iterations = 0;
    lse_cols(c, &f, epsilon, &mut col_top, &mut col_lse);
    let residual = loop {
        if iterations > 0 {
            let residual = Zip::from(&g)
                .and(&col_lse)
                .and(b)
                .fold(0.0, |acc, &gj, &lj, &bj| acc + ((gj / epsilon + lj).exp() - bj).abs());
            let done = match rho {
                Some(r) => residual < r || iterations >= max_iter,
                None => iterations >= max_iter,
            };
            if done {
                break residual;
            }
        }
        Zip::from(&mut g)
            .and(&log_b)
            .and(&col_lse)
            .for_each(|gj, &lb, &l| *gj = lb - epsilon * l);
        lse_rows(c, &g, epsilon, &mut row_lse);
        f_minus.assign(&f);
        Zip::from(&mut f)
            .and(&log_a)
            .and(&row_lse)
            .for_each(|fi, &la, &l| *fi = la - epsilon * l);
        iterations += 1;
        lse_cols(c, &f, epsilon, &mut col_top, &mut col_lse);
    };
    let plan = gibbs_plan(c, &f, &g, epsilon);
    let plan_minus = gibbs_plan(c, &f_minus, &g, epsilon);
    TransportSolution {
        f,
        f_minus,
        g,
        plan,
        plan_minus,
        epsilon,
        residual,
        iterations,
        tolerance: rho,
    }
}

/// Stabilized log-domain Sinkhorn, iterated until the L1 column residual is
/// below `rho`.
pub fn log_sinkhorn(
    mu: &DiscreteMeasure,
    nu: &AnchorGrid,
    cost: CostSpec,
    epsilon: f64,
    rho: f64,
    max_iter: usize,
) -> Result<TransportSolution> {
    check_epsilon(epsilon)?;
    if !(rho > 0.0) {
        return Err(Error::invalid(format!("tolerance must be positive, got {rho}")));
    }
    let c = cost_matrix(mu.values(), nu.values(), cost)?;
    let sol = log_loop(mu.weights(), nu.weights(), &c, epsilon, max_iter, Some(rho));
    if sol.converged() {
        Ok(sol)
    } else {
        Err(Error::MaxIterExceeded {
            iterations: sol.iterations,
            residual: sol.residual,
        })
    }
}

/// Solves the transport problem with whichever form is numerically safe.
///
/// The scaling form is used while `max(C) / eps <= SCALING_MAX_RATIO`, with
/// a fallback to the log domain on underflow. The returned solution may be
/// unconverged when a tolerance was requested; check
/// [`TransportSolution::converged`].
pub fn solve(mu: &DiscreteMeasure, nu: &AnchorGrid, opts: &SinkhornOptions) -> Result<TransportSolution> {
    check_epsilon(opts.epsilon)?;
    let c = cost_matrix(mu.values(), nu.values(), opts.cost)?;
    solve_with_cost(mu.weights(), nu.weights(), &c, opts)
}

pub(crate) fn solve_with_cost(
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    c: &Array2<f64>,
    opts: &SinkhornOptions,
) -> Result<TransportSolution> {
    let eps = opts.epsilon;
    let (max_iter, rho) = match opts.control {
        IterControl::Fixed(l) => {
            if l == 0 {
                return Err(Error::invalid("at least one Sinkhorn iteration is required"));
            }
            (l, None)
        }
        IterControl::Tolerance { rho, max_iter } => {
            if !(rho > 0.0) {
                return Err(Error::invalid(format!("tolerance must be positive, got {rho}")));
            }
            (max_iter.max(1), Some(rho))
        }
    };
    let cmax = c.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
    if cmax / eps <= SCALING_MAX_RATIO {
        if let Ok(kernel) = gibbs_kernel(c, eps) {
            if let Ok((state, residual)) = scaling_loop(a, b, kernel, eps, max_iter, rho) {
                return Ok(TransportSolution::from_scaling(state, residual, rho));
            }
        }
    }
    Ok(log_loop(a, b, c, eps, max_iter, rho))
}

/// Per-row affine map of `x` onto `[0, 1]`.
///
/// A constant row is sent to `0.5` with a zero scale. The pullback
/// [`Rescale::vjp`] differentiates through the row minimum and maximum, which
/// is exact wherever those are attained at a single index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rescale {
    pub offset: f64,
    pub scale: f64,
    pub argmin: usize,
    pub argmax: usize,
}

impl Rescale {
    pub fn fit(x: ArrayView1<f64>) -> Result<(Self, Array1<f64>)> {
        check_finite(x, "x")?;
        if x.is_empty() {
            return Err(Error::invalid("cannot rescale an empty vector"));
        }
        let (mut argmin, mut argmax) = (0, 0);
        for (i, &v) in x.iter().enumerate() {
            if v < x[argmin] {
                argmin = i;
            }
            if v > x[argmax] {
                argmax = i;
            }
        }
        let range = x[argmax] - x[argmin];
        if range > 0.0 {
            let r = Rescale {
                offset: x[argmin],
                scale: 1.0 / range,
                argmin,
                argmax,
            };
            let xs = x.mapv(|v| ((v - r.offset) * r.scale).clamp(0.0, 1.0));
            Ok((r, xs))
        } else {
            let r = Rescale {
                offset: x[0],
                scale: 0.0,
                argmin,
                argmax,
            };
            Ok((r, Array1::from_elem(x.len(), 0.5)))
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.scale == 0.0
    }

    /// Pulls a cotangent on the rescaled values `xs` back to the raw values.
    pub fn vjp(&self, xs: ArrayView1<f64>, cot: ArrayView1<f64>) -> Array1<f64> {
        if self.is_degenerate() {
            return Array1::zeros(cot.len());
        }
        let mut out = cot.mapv(|c| c * self.scale);
        let (mut to_min, mut to_max) = (0.0, 0.0);
        Zip::from(&xs).and(&cot).for_each(|&x, &c| {
            to_min += c * (x - 1.0);
            to_max -= c * x;
        });
        out[self.argmin] += to_min * self.scale;
        out[self.argmax] += to_max * self.scale;
        out
    }
}

/// Column sums of a plan.
pub fn column_sums(p: &Array2<f64>) -> Array1<f64> {
    p.sum_axis(Axis(0))
}

/// Row sums of a plan.
pub fn row_sums(p: &Array2<f64>) -> Array1<f64> {
    p.sum_axis(Axis(1))
}
