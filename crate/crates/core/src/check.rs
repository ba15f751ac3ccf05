//! Finite-difference gradient checks and implicit-versus-unrolled timings,
//! shared by the command line tool and the test suites.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::implicit::{build_workspace, unrolled_vjp_plan_wrt_x, vjp_plan, vjp_quantile};
use crate::ot::{self, AnchorGrid, CostSpec, DiscreteMeasure, SinkhornOptions};
use crate::soft::{soft_quantile_normalize, TargetSpec};

/// `max |a - b| / max |b|`, with the denominator floored at `1e-12`.
pub fn relative_error(approx: ArrayView1<f64>, reference: ArrayView1<f64>) -> f64 {
    let scale = reference.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1e-12);
    approx
        .iter()
        .zip(reference)
        .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()))
        / scale
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }
}

/// A random well-conditioned transport problem.
pub struct Instance {
    pub a: Array1<f64>,
    pub x: Array1<f64>,
    pub b: Array1<f64>,
    pub y: Array1<f64>,
    pub q: Array1<f64>,
    pub epsilon: f64,
}

fn simplex(rng: &mut impl Rng, len: usize) -> Array1<f64> {
    let mut w = Array1::from_shape_simple_fn(len, || 0.2 + rng.random::<f64>());
    let total = w.sum();
    w /= total;
    w
}

impl Instance {
    pub fn random(rng: &mut impl Rng) -> Self {
        let n = rng.random_range(3..=8);
        let m = rng.random_range(2..=5);
        let mut q = Array1::from_shape_simple_fn(m, || 0.1 + rng.random::<f64>());
        q.accumulate_axis_inplace(ndarray::Axis(0), |&p, c| *c += p);
        Self {
            a: simplex(rng, n),
            x: Array1::from_shape_simple_fn(n, || 3.0 * rng.sample::<f64, _>(StandardNormal)),
            b: simplex(rng, m),
            y: ot::regular_grid(m),
            q,
            epsilon: [0.05, 0.1, 0.5][rng.random_range(0..3)],
        }
    }

    pub fn options(&self) -> SinkhornOptions {
        SinkhornOptions::tolerance(self.epsilon, 1e-14, 1_000_000)
    }
}

const STEP: f64 = 1e-6;

fn central(f: impl Fn(f64) -> f64) -> f64 {
    (f(STEP) - f(-STEP)) / (2.0 * STEP)
}

fn sum_zero_directions(m: usize) -> Vec<Array1<f64>> {
    (1..m)
        .map(|j| {
            let mut e = Array1::zeros(m);
            e[j] = 1.0;
            e[0] = -1.0;
            e
        })
        .collect()
}

/// Errors of one instance: plan-level in x and b, then quantile-level in
/// x, b and q.
pub fn instance_errors(inst: &Instance, rng: &mut impl Rng) -> Result<[f64; 5]> {
    let (n, m) = (inst.a.len(), inst.b.len());
    let opts = inst.options();
    let h = Array2::from_shape_simple_fn((n, m), || rng.sample::<f64, _>(StandardNormal));
    let hv = Array1::from_shape_simple_fn(n, || rng.sample::<f64, _>(StandardNormal));
    // plan level, inputs already in [0, 1]
    let (_, xs) = ot::Rescale::fit(inst.x.view())?;
    let plan_at = |x: &Array1<f64>, b: &Array1<f64>| -> f64 {
        let mu = DiscreteMeasure::new(inst.a.clone(), x.clone()).expect("valid measure");
        let nu = AnchorGrid::new(b.clone(), inst.y.clone()).expect("valid grid");
        let sol = ot::solve(&mu, &nu, &opts).expect("solvable");
        (&sol.plan * &h).sum()
    };
    let mu = DiscreteMeasure::new(inst.a.clone(), xs.clone())?;
    let nu = AnchorGrid::new(inst.b.clone(), inst.y.clone())?;
    let sol = ot::solve(&mu, &nu, &opts)?;
    let ws = build_workspace(&sol, xs.view(), inst.y.view(), CostSpec::SquaredDifference)?;
    let (gx, gb) = vjp_plan(h.view(), &ws)?;
    let fd_x = Array1::from_shape_fn(n, |i| {
        central(|t| {
            let mut x = xs.clone();
            x[i] += t;
            plan_at(&x, &inst.b)
        })
    });
    let dirs = sum_zero_directions(m);
    let fd_b = Array1::from_iter(dirs.iter().map(|e| central(|t| plan_at(&xs, &(&inst.b + &(e * t))))));
    let an_b = Array1::from_iter(dirs.iter().map(|e| e.dot(&gb)));

    // quantile level, raw inputs through the rescale
    let quant_at = |x: &Array1<f64>, b: &Array1<f64>, q: &Array1<f64>| -> f64 {
        let spec = TargetSpec::new(b.clone(), q.clone(), inst.y.clone()).expect("valid spec");
        let out = soft_quantile_normalize(inst.a.view(), x.view(), &spec, &opts).expect("solvable");
        out.output.dot(&hv)
    };
    let spec = TargetSpec::new(inst.b.clone(), inst.q.clone(), inst.y.clone())?;
    let res = soft_quantile_normalize(inst.a.view(), inst.x.view(), &spec, &opts)?;
    let ws = build_workspace(&res.solution, res.scaled.view(), inst.y.view(), CostSpec::SquaredDifference)?;
    let bundle = vjp_quantile(hv.view(), &ws, inst.q.view(), inst.a.view())?;
    let qx = res.rescale.vjp(res.scaled.view(), bundle.wrt_x.view());
    let fd_qx = Array1::from_shape_fn(n, |i| {
        central(|t| {
            let mut x = inst.x.clone();
            x[i] += t;
            quant_at(&x, &inst.b, &inst.q)
        })
    });
    let fd_qb = Array1::from_iter(dirs.iter().map(|e| central(|t| quant_at(&inst.x, &(&inst.b + &(e * t)), &inst.q))));
    let an_qb = Array1::from_iter(dirs.iter().map(|e| e.dot(&bundle.wrt_b)));
    let fd_qq = Array1::from_shape_fn(m, |j| {
        central(|t| {
            let mut q = inst.q.clone();
            q[j] += t;
            quant_at(&inst.x, &inst.b, &q)
        })
    });
    Ok([
        relative_error(gx.view(), fd_x.view()),
        relative_error(an_b.view(), fd_b.view()),
        relative_error(qx.view(), fd_qx.view()),
        relative_error(an_qb.view(), fd_qb.view()),
        relative_error(bundle.wrt_q.view(), fd_qq.view()),
    ])
}

/// Compares every implicit VJP against central differences on `instances`
/// random problems.
pub fn gradcheck(seed: u64, instances: usize, tolerance: f64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = ["plan wrt x", "plan wrt b", "quantile wrt x", "quantile wrt b", "quantile wrt q"];
    let mut worst = [0.0f64; 5];
    for _ in 0..instances {
        let inst = Instance::random(&mut rng);
        let errs = instance_errors(&inst, &mut rng)?;
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(if e.is_nan() { f64::INFINITY } else { e });
        }
    }
    Ok(GradcheckReport {
        checks: names
            .iter()
            .zip(worst)
            .map(|(name, max_rel_err)| CheckResult {
                name: name.to_string(),
                instances,
                max_rel_err,
                tolerance,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub m: usize,
    pub epsilon: f64,
    pub iterations: usize,
    /// Tolerance-driven forward solve, workspace and VJP.
    pub implicit_secs: f64,
    /// Forward with a stored tape for the same iteration count, then the
    /// reverse pass.
    pub unrolled_secs: f64,
}

impl BenchRow {
    pub fn speedup(&self) -> f64 {
        self.unrolled_secs / self.implicit_secs
    }
}

/// Random sorted-free inputs on `[0, 1]` and a regular grid with uniform
/// weights.
pub fn bench_problem(n: usize, m: usize, seed: u64) -> Result<(DiscreteMeasure, AnchorGrid, Array2<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array1::from_shape_simple_fn(n, || rng.random::<f64>());
    let mu = DiscreteMeasure::uniform(x)?;
    let nu = AnchorGrid::uniform(m)?;
    let h = Array2::from_shape_simple_fn((n, m), || rng.sample::<f64, _>(StandardNormal));
    Ok((mu, nu, h))
}

/// Best-of-`reps` wall-clock times of both gradient paths.
pub fn bench_vjp(n: usize, m: usize, epsilon: f64, rho: f64, reps: usize, seed: u64) -> Result<BenchRow> {
    let (mu, nu, h) = bench_problem(n, m, seed)?;
    let opts = SinkhornOptions::tolerance(epsilon, rho, 100_000);
    let mut implicit = f64::INFINITY;
    let mut unrolled = f64::INFINITY;
    let mut iterations = 0;
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        let sol = ot::solve(&mu, &nu, &opts)?;
        let ws = build_workspace(&sol, mu.values(), nu.values(), CostSpec::SquaredDifference)?;
        let g = crate::implicit::vjp_plan_wrt_x(h.view(), &ws)?;
        implicit = implicit.min(t.elapsed().as_secs_f64());
        std::hint::black_box(g);
        iterations = sol.iterations;

        let t = Instant::now();
        let out = unrolled_vjp_plan_wrt_x(&mu, &nu, CostSpec::SquaredDifference, epsilon, iterations, h.view())?;
        unrolled = unrolled.min(t.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    Ok(BenchRow {
        n,
        m,
        epsilon,
        iterations,
        implicit_secs: implicit,
        unrolled_secs: unrolled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_examples() {
        let a = ndarray::array![1.0, 2.0];
        assert_eq!(relative_error(a.view(), a.view()), 0.0);
        assert_eq!(relative_error(ndarray::array![1.0, 2.5].view(), ndarray::array![1.0, 2.0].view()), 0.25);
    }

    #[test]
    fn small_gradcheck_passes() {
        let report = gradcheck(3, 3, 1e-4).unwrap();
        for c in &report.checks {
            assert!(c.passed(), "{}: {}", c.name, c.max_rel_err);
        }
    }
}
