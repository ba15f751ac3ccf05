//! Reverse-mode gradients of the converged transport plan by implicit
//! differentiation of the dual optimality conditions.
//!
//! At a solution `P = exp((f + g - C) / eps)` with row sums `r` and column
//! sums `c`, a perturbation `(df, dg, dC)` moves the marginals by
//!
//! ```text
//! eps * d(P 1)   = r * df + P dg - (P o dC) 1
//! eps * d(P^T 1) = P^T df + c * dg - (P o dC)^T 1
//! ```
//!
//! The potentials are only defined up to `(f + t, g - t)`, so `f[0]` is
//! pinned to zero and the first row equation is dropped. For a cotangent
//! `H` on `P`, the adjoint `w` solves the pinned system with right-hand side
//! `((H o P) 1, (H o P)^T 1)`. Eliminating the row block leaves an `m x m`
//! system with the Schur complement `S = I - M2 M1`, where `M1 = diag(1/r) P`
//! with its first row zeroed and `M2 = diag(1/c) P^T`. Then
//!
//! ```text
//! dL/dx_i = (1/eps) sum_j P_ij D_ij (w_f,i + w_g,j - H_ij),   D_ij = dc/dx(x_i, y_j)
//! dL/db_j = w_g,j
//! ```
//!
//! `D` is the derivative of the cost in its first argument, `2 (x_i - y_j)`
//! for the squared cost. Writing the cost derivative as `2 (y_j - x_i)`
//! instead flips the sign of every term in the x-gradient. The b-cotangent
//! is reported in ambient coordinates and is only meaningful along sum-zero
//! directions. All formulas here were checked against central finite
//! differences.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::ot::{self, CostSpec, TransportSolution};

/// Everything needed to apply transpose-Jacobians of a converged plan.
/// Immutable once built, so VJPs may run concurrently on a shared workspace.
#[derive(Debug, Clone)]
pub struct VjpWorkspace {
    plan: Array2<f64>,
    /// `diag(1/r) P` with the first row zeroed.
    m1: Array2<f64>,
    /// `diag(1/c) P^T`.
    m2: Array2<f64>,
    row_mass: Array1<f64>,
    col_mass: Array1<f64>,
    /// `D_ij = dc/dx(x_i, y_j)`.
    delta: Array2<f64>,
    schur: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    epsilon: f64,
    f: Array1<f64>,
    g: Array1<f64>,
}

/// Cotangents of one operator with respect to its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CotangentBundle {
    pub wrt_x: Array1<f64>,
    pub wrt_b: Array1<f64>,
    pub wrt_q: Array1<f64>,
}

impl VjpWorkspace {
    pub fn plan(&self) -> &Array2<f64> {
        &self.plan
    }

    pub fn m1(&self) -> &Array2<f64> {
        &self.m1
    }

    pub fn m2(&self) -> &Array2<f64> {
        &self.m2
    }

    pub fn delta(&self) -> &Array2<f64> {
        &self.delta
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Pinned potentials, `f[0] == 0`.
    pub fn potentials(&self) -> (&Array1<f64>, &Array1<f64>) {
        (&self.f, &self.g)
    }

    /// The Schur complement `S = I - M2 M1`, rebuilt from the kernels.
    pub fn schur_matrix(&self) -> Array2<f64> {
        let mut s = self.m2.dot(&self.m1);
        s.mapv_inplace(|v| -v);
        s.diag_mut().mapv_inplace(|v| v + 1.0);
        s
    }

    /// Solves `S z = rhs` with the stored factorization.
    pub fn solve_schur(&self, rhs: ArrayView1<f64>) -> Result<Array1<f64>> {
        let b = DVector::from_iterator(rhs.len(), rhs.iter().copied());
        self.schur
            .solve(&b)
            .map(|z| Array1::from_iter(z.iter().copied()))
            .ok_or_else(|| Error::SingularSchur("LU solve failed".into()))
    }

    fn dims(&self) -> (usize, usize) {
        self.plan.dim()
    }

    /// Adjoint `(w_f, w_g)` of the pinned marginal system for cotangent `H`,
    /// together with `H o P`.
    fn adjoint(&self, h: ArrayView2<f64>) -> Result<(Array1<f64>, Array1<f64>, Array2<f64>)> {
        if h.dim() != self.dims() {
            return Err(Error::invalid(format!(
                "cotangent shape {:?} does not match plan shape {:?}",
                h.dim(),
                self.dims()
            )));
        }
        let hp = &h * &self.plan;
        let mut zf = hp.sum_axis(Axis(1));
        Zip::from(&mut zf).and(&self.row_mass).for_each(|z, &r| *z /= r);
        zf[0] = 0.0;
        let mut rhs = hp.sum_axis(Axis(0));
        Zip::from(&mut rhs).and(&self.col_mass).for_each(|z, &c| *z /= c);
        rhs -= &self.m2.dot(&zf);
        let wg = self.solve_schur(rhs.view())?;
        let wf = zf - self.m1.dot(&wg);
        Ok((wf, wg, hp))
    }

    fn x_from_adjoint(&self, wf: &Array1<f64>, wg: &Array1<f64>, hp: &Array2<f64>) -> Array1<f64> {
        let inv_eps = 1.0 / self.epsilon;
        let mut out = Array1::zeros(self.plan.nrows());
        Zip::from(&mut out)
            .and(self.plan.rows())
            .and(hp.rows())
            .and(self.delta.rows())
            .and(wf)
            .for_each(|o, prow, hprow, drow, &wfi| {
                let mut acc = 0.0;
                Zip::from(&prow)
                    .and(&hprow)
                    .and(&drow)
                    .and(wg)
                    .for_each(|&p, &hp, &d, &wgj| acc += d * (p * (wfi + wgj) - hp));
                *o = acc * inv_eps;
            });
        out
    }
}

/// Pins the potentials and factorizes the Schur complement of a converged
/// solution. `x` are the values the cost was evaluated on (after any
/// rescaling) and `y` the anchor values.
pub fn build_workspace(
    solution: &TransportSolution,
    x: ArrayView1<f64>,
    y: ArrayView1<f64>,
    cost: CostSpec,
) -> Result<VjpWorkspace> {
    if !solution.converged() {
        return Err(Error::NotConverged {
            residual: solution.residual,
            tolerance: solution.tolerance.unwrap_or(0.0),
        });
    }
    let plan = solution.plan.clone();
    let (n, m) = plan.dim();
    if x.len() != n || y.len() != m {
        return Err(Error::invalid(format!(
            "plan is {n}x{m} but x has {} and y has {} entries",
            x.len(),
            y.len()
        )));
    }
    let shift = solution.f[0];
    let f = solution.f.mapv(|v| v - shift);
    let g = solution.g.mapv(|v| v + shift);

    let row_mass = ot::row_sums(&plan);
    let col_mass = ot::column_sums(&plan);
    if row_mass.iter().chain(col_mass.iter()).any(|v| !(*v > 0.0)) {
        return Err(Error::SingularSchur("plan has an empty row or column".into()));
    }
    let mut m1 = plan.clone();
    Zip::from(m1.rows_mut()).and(&row_mass).for_each(|mut row, &r| row.mapv_inplace(|p| p / r));
    m1.row_mut(0).fill(0.0);
    let mut m2 = plan.t().to_owned();
    Zip::from(m2.rows_mut()).and(&col_mass).for_each(|mut row, &c| row.mapv_inplace(|p| p / c));
    let delta = Array2::from_shape_fn((n, m), |(i, j)| cost.dcost_dx(x[i], y[j]));

    let mut s = m2.dot(&m1);
    s.mapv_inplace(|v| -v);
    s.diag_mut().mapv_inplace(|v| v + 1.0);
    let schur = DMatrix::from_fn(m, m, |i, j| s[[i, j]]).lu();
    let pivots = schur.u().diagonal();
    let largest = pivots.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let smallest = pivots.iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
    if !(smallest.is_finite() && smallest > 1e-14 * largest.max(1.0)) {
        return Err(Error::SingularSchur(format!(
            "smallest pivot {smallest:e} against largest {largest:e}"
        )));
    }
    Ok(VjpWorkspace {
        plan,
        m1,
        m2,
        row_mass,
        col_mass,
        delta,
        schur,
        epsilon: solution.epsilon,
        f,
        g,
    })
}

/// Transpose-Jacobian of the plan with respect to `x`, applied to `H`.
pub fn vjp_plan_wrt_x(h: ArrayView2<f64>, ws: &VjpWorkspace) -> Result<Array1<f64>> {
    let (wf, wg, hp) = ws.adjoint(h)?;
    Ok(ws.x_from_adjoint(&wf, &wg, &hp))
}

/// Transpose-Jacobian of the plan with respect to `b`, applied to `H`.
pub fn vjp_plan_wrt_b(h: ArrayView2<f64>, ws: &VjpWorkspace) -> Result<Array1<f64>> {
    ws.adjoint(h).map(|(_, wg, _)| wg)
}

/// Both plan cotangents from a single adjoint solve.
pub fn vjp_plan(h: ArrayView2<f64>, ws: &VjpWorkspace) -> Result<(Array1<f64>, Array1<f64>)> {
    let (wf, wg, hp) = ws.adjoint(h)?;
    Ok((ws.x_from_adjoint(&wf, &wg, &hp), wg))
}

/// Gradient of `<h, (P q) / a>` in `q`: `P^T (h / a)`.
pub fn vjp_quantile_wrt_q(h: ArrayView1<f64>, solution: &TransportSolution, a: ArrayView1<f64>) -> Array1<f64> {
    let ha = &h / &a;
    solution.plan.t().dot(&ha)
}

fn quantile_cotangent(h: ArrayView1<f64>, q: ArrayView1<f64>, a: ArrayView1<f64>) -> Array2<f64> {
    let ha = &h / &a;
    Array2::from_shape_fn((h.len(), q.len()), |(i, j)| ha[i] * q[j])
}

/// Gradient of `<h, (P q) / a>` in `x` through the plan.
pub fn vjp_quantile_wrt_x(
    h: ArrayView1<f64>,
    ws: &VjpWorkspace,
    q: ArrayView1<f64>,
    a: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    vjp_plan_wrt_x(quantile_cotangent(h, q, a).view(), ws)
}

/// All cotangents of the quantile operator `(P q) / a` for output cotangent `h`.
pub fn vjp_quantile(
    h: ArrayView1<f64>,
    ws: &VjpWorkspace,
    q: ArrayView1<f64>,
    a: ArrayView1<f64>,
) -> Result<CotangentBundle> {
    let (wrt_x, wrt_b) = vjp_plan(quantile_cotangent(h, q, a).view(), ws)?;
    let ha = &h / &a;
    let wrt_q = ws.plan.t().dot(&ha);
    Ok(CotangentBundle { wrt_x, wrt_b, wrt_q })
}

/// Central-difference Jacobian; column `j` is
/// `(f(p + h e_j) - f(p - h e_j)) / (2 h)`.
pub fn finite_diff_oracle<F>(f: F, point: ArrayView1<f64>, step: f64) -> Array2<f64>
where
    F: Fn(ArrayView1<f64>) -> Array1<f64>,
{
    let mut probe = point.to_owned();
    let mut columns = Vec::with_capacity(point.len());
    for j in 0..point.len() {
        let orig = probe[j];
        probe[j] = orig + step;
        let up = f(probe.view());
        probe[j] = orig - step;
        let down = f(probe.view());
        probe[j] = orig;
        columns.push((up - down) / (2.0 * step));
    }
    let rows = columns.first().map_or(0, |c| c.len());
    Array2::from_shape_fn((rows, point.len()), |(i, j)| columns[j][i])
}

/// Gradient of `<H, P+>` in `x` by reverse-mode differentiation through
/// `iterations` scaling-form Sinkhorn iterations.
///
/// This is the unrolled reference path: it stores every iterate, so its
/// memory grows with the iteration count. Returns `(plan_plus, grad_x)`.
pub fn unrolled_vjp_plan_wrt_x(
    mu: &ot::DiscreteMeasure,
    nu: &ot::AnchorGrid,
    cost: CostSpec,
    epsilon: f64,
    iterations: usize,
    h: ArrayView2<f64>,
) -> Result<(Array2<f64>, Array1<f64>)> {
    if iterations == 0 {
        return Err(Error::invalid("at least one Sinkhorn iteration is required"));
    }
    let (a, b, x, y) = (mu.weights(), nu.weights(), mu.values(), nu.values());
    let (n, m) = (a.len(), b.len());
    if h.dim() != (n, m) {
        return Err(Error::invalid("cotangent shape does not match the problem"));
    }
    let c = ot::cost_matrix(x, y, cost)?;
    let k = c.mapv(|v| (-v / epsilon).exp());

    // tape: u_0..u_l, v_1..v_l, K^T u_{t-1}, K v_t
    let mut us = Vec::with_capacity(iterations + 1);
    let mut vs = Vec::with_capacity(iterations);
    let mut ktus = Vec::with_capacity(iterations);
    let mut kvs = Vec::with_capacity(iterations);
    us.push(Array1::<f64>::ones(n));
    for t in 0..iterations {
        let ktu = k.t().dot(&us[t]);
        let v = &b / &ktu;
        let kv = k.dot(&v);
        let u = &a / &kv;
        if !(usable(&u) && usable(&v)) {
            return Err(Error::Underflow(format!("scalings left the f64 range at iteration {}", t + 1)));
        }
        ktus.push(ktu);
        vs.push(v);
        kvs.push(kv);
        us.push(u);
    }
    let u_last = &us[iterations];
    let v_last = &vs[iterations - 1];
    let plan = Array2::from_shape_fn((n, m), |(i, j)| u_last[i] * k[[i, j]] * v_last[j]);

    // reverse pass
    let hk = &h * &k;
    let mut k_bar = Array2::from_shape_fn((n, m), |(i, j)| h[[i, j]] * u_last[i] * v_last[j]);
    let mut u_bar = hk.dot(v_last);
    let mut v_bar = hk.t().dot(u_last);
    for t in (0..iterations).rev() {
        let (u_t, u_prev, v_t) = (&us[t + 1], &us[t], &vs[t]);
        // u_t = a / (K v_t)
        let s_bar = Zip::from(&u_bar).and(u_t).and(&kvs[t]).map_collect(|&ub, &u, &s| -ub * u / s);
        v_bar += &k.t().dot(&s_bar);
        outer_add(&mut k_bar, &s_bar, v_t);
        // v_t = b / (K^T u_{t-1})
        let w_bar = Zip::from(&v_bar).and(v_t).and(&ktus[t]).map_collect(|&vb, &v, &w| -vb * v / w);
        outer_add(&mut k_bar, u_prev, &w_bar);
        u_bar = k.dot(&w_bar);
        v_bar.fill(0.0);
    }
    let mut grad = Array1::zeros(n);
    Zip::from(&mut grad).and(k_bar.rows()).and(k.rows()).and(&x).for_each(|gi, kb, kr, &xi| {
        let mut acc = 0.0;
        Zip::from(&kb).and(&kr).and(&y).for_each(|&kbij, &kij, &yj| {
            acc -= kbij * kij * cost.dcost_dx(xi, yj) / epsilon;
        });
        *gi = acc;
    });
    Ok((plan, grad))
}

fn usable(v: &Array1<f64>) -> bool {
    v.iter().all(|x| x.is_finite() && *x > 0.0)
}

fn outer_add(target: &mut Array2<f64>, left: &Array1<f64>, right: &Array1<f64>) {
    Zip::from(target.rows_mut()).and(left).for_each(|mut row, &l| {
        Zip::from(&mut row).and(right).for_each(|t, &r| *t += l * r);
    });
}
