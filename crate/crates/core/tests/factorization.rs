mod common;

use common::*;
use ndarray::{array, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softquant::check::relative_error;
use softquant::factor::{
    kl_div, nmf_init, nmf_multiplicative, qmf_loss_and_grad, qmf_objective, qmf_train, qmfq_loss, qmfq_loss_and_grad,
    qmfq_train, reconstruct, row_ranges, train, unrolled_nmf, Method, TrainConfig,
};
use softquant::ot::SinkhornOptions;
use softquant::params::{quantiles_free, FactorPrecursors, PrecursorSet};
use softquant::synth::{synth_generate, SynthConfig};
use softquant::Error;

fn random_data(r: &mut impl Rng, d: usize, n: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((d, n), || if r.random::<f64>() < 0.15 { 0.0 } else { 3.0 * r.random::<f64>() })
}

fn random_factors(r: &mut impl Rng, d: usize, n: usize, k: usize) -> FactorPrecursors {
    FactorPrecursors::new(
        Array2::from_shape_simple_fn((d, k), || 0.5 * normal(r) - 0.5),
        Array2::from_shape_simple_fn((k, n), || 0.5 * normal(r) - 0.5),
    )
    .unwrap()
}

fn random_pinned(r: &mut impl Rng, x: &Array2<f64>, m: usize) -> PrecursorSet {
    let (s, t) = row_ranges(x.view());
    let mut set = PrecursorSet::pinned(s, t, m).unwrap();
    set.weights.mapv_inplace(|_| 0.3 * normal(r));
    set.quantiles.mapv_inplace(|_| 0.3 * normal(r));
    set
}

/// Central differences of `loss` over every entry of `param`.
fn fd_block(param: &Array2<f64>, loss: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let h = 1e-6;
    let mut probe = param.clone();
    Array2::from_shape_fn(param.dim(), |(i, j)| {
        let orig = probe[[i, j]];
        probe[[i, j]] = orig + h;
        let up = loss(&probe);
        probe[[i, j]] = orig - h;
        let dn = loss(&probe);
        probe[[i, j]] = orig;
        (up - dn) / (2.0 * h)
    })
}

fn flat(a: &Array2<f64>) -> Array1<f64> {
    Array1::from_iter(a.iter().copied())
}

#[test]
fn kl_examples() {
    let x = array![[1.0, 0.7], [2.5, 0.3]];
    assert_eq!(kl_div(x.view(), x.view()).unwrap(), 0.0);
    assert_eq!(kl_div(array![[0.0]].view(), array![[3.0]].view()).unwrap(), 3.0);
    let v = kl_div(array![[2.0]].view(), array![[1.0]].view()).unwrap();
    assert!((v - (2.0 * 2f64.ln() - 1.0)).abs() < 1e-15);
    assert!(matches!(kl_div(array![[-1.0]].view(), array![[1.0]].view()), Err(Error::InvalidInput(_))));
}

#[test]
fn nmf_recovers_a_rank_one_matrix() {
    let u = array![1.0, 2.0, 0.5, 3.0];
    let v = array![0.2, 1.5, 0.7, 2.0, 1.1];
    let x = Array2::from_shape_fn((4, 5), |(i, j)| u[i] * v[j]);
    let (_, _, curve) = nmf_multiplicative(x.view(), 1, 500, 3, 1e-12).unwrap();
    assert!(curve.last() < 1e-6, "{}", curve.last());
}

#[test]
fn nmf_never_increases_the_loss() {
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let (d, n) = (r.random_range(2..12), r.random_range(2..12));
        let k = r.random_range(1..5);
        let x = random_data(&mut r, d, n);
        let (_, _, curve) = nmf_multiplicative(x.view(), k, 200, seed, 1e-12).unwrap();
        let mut prev = curve.initial;
        for &kl in &curve.steps {
            assert!(kl <= prev + 1e-12, "seed {seed}: {prev} -> {kl}");
            prev = kl;
        }
    }
}

#[test]
fn overcomplete_nmf_fits_positive_data() {
    let mut r = rng(4);
    let x = Array2::from_shape_simple_fn((5, 4), || 0.5 + r.random::<f64>());
    let (_, _, curve) = nmf_multiplicative(x.view(), 4, 5000, 1, 1e-12).unwrap();
    assert!(curve.last() < 1e-4 * x.sum(), "{}", curve.last());
}

#[test]
fn qmf_gradients_match_finite_differences() {
    let (d, n, k, m) = (4, 6, 2, 3);
    let mut worst = 0.0f64;
    for inst in 0..30u64 {
        let mut r = rng(100 + inst);
        let eps = [0.05, 0.1][inst as usize % 2];
        let opts = SinkhornOptions::tolerance(eps, 1e-13, 1_000_000);
        let x = random_data(&mut r, d, n);
        let factors = random_factors(&mut r, d, n, k);
        let set = random_pinned(&mut r, &x, m);
        let rows: Vec<usize> = (0..d).collect();
        let g = qmf_loss_and_grad(x.view(), &factors, &set, &rows, &opts).unwrap();
        assert_eq!(g.skipped_rows, 0);
        let loss = |f: &FactorPrecursors, s: &PrecursorSet| qmf_loss_and_grad(x.view(), f, s, &rows, &opts).unwrap().loss;

        let fd_u = fd_block(&factors.log_u, |p| {
            loss(&FactorPrecursors::new(p.clone(), factors.log_v.clone()).unwrap(), &set)
        });
        let fd_v = fd_block(&factors.log_v, |p| {
            loss(&FactorPrecursors::new(factors.log_u.clone(), p.clone()).unwrap(), &set)
        });
        let fd_w = fd_block(&set.weights, |p| {
            let mut s = set.clone();
            s.weights = p.clone();
            loss(&factors, &s)
        });
        let fd_q = fd_block(&set.quantiles, |p| {
            let mut s = set.clone();
            s.quantiles = p.clone();
            loss(&factors, &s)
        });
        for (an, fd) in [(&g.log_u, &fd_u), (&g.log_v, &fd_v), (&g.weights, &fd_w), (&g.quantiles, &fd_q)] {
            let e = relative_error(flat(an).view(), flat(fd).view());
            worst = worst.max(e);
            assert!(e < 1e-4, "instance {inst}: {e:e}");
        }
    }
    println!("worst relative error {worst:e}");
}

#[test]
fn batches_are_separable() {
    let mut r = rng(7);
    let (d, n, k, m) = (5, 7, 2, 4);
    let x = random_data(&mut r, d, n);
    let factors = random_factors(&mut r, d, n, k);
    let set = random_pinned(&mut r, &x, m);
    let opts = SinkhornOptions::tolerance(0.05, 1e-10, 100_000);
    let all: Vec<usize> = (0..d).collect();
    let full = qmf_loss_and_grad(x.view(), &factors, &set, &all, &opts).unwrap();
    let mut loss = 0.0;
    let (mut gu, mut gv, mut gw, mut gq) = (
        Array2::<f64>::zeros(full.log_u.dim()),
        Array2::<f64>::zeros(full.log_v.dim()),
        Array2::<f64>::zeros(full.weights.dim()),
        Array2::<f64>::zeros(full.quantiles.dim()),
    );
    for i in (0..d).rev() {
        let g = qmf_loss_and_grad(x.view(), &factors, &set, &[i], &opts).unwrap();
        loss += g.loss;
        gu += &g.log_u;
        gv += &g.log_v;
        gw += &g.weights;
        gq += &g.quantiles;
    }
    assert!((loss - full.loss).abs() <= 1e-12 * full.loss.max(1.0));
    for (a, b) in [(&gu, &full.log_u), (&gv, &full.log_v), (&gw, &full.weights), (&gq, &full.quantiles)] {
        assert!(max_abs_diff(a, b) <= 1e-12 * b.iter().fold(1.0f64, |m, v| m.max(v.abs())));
    }
    // reordering a full batch changes nothing
    let shuffled = [3, 0, 4, 1, 2];
    let g = qmf_loss_and_grad(x.view(), &factors, &set, &shuffled, &opts).unwrap();
    assert!((g.loss - full.loss).abs() <= 1e-12 * full.loss.max(1.0));
    assert!(max_abs_diff(&g.log_v, &full.log_v) <= 1e-12 * full.log_v.iter().fold(1.0f64, |m, v| m.max(v.abs())));
    assert_eq!(g.log_u, full.log_u);
}

fn small_synth(seed: u64) -> Array2<f64> {
    synth_generate(&SynthConfig {
        d: 24,
        n: 16,
        k: 3,
        m_star: 16,
        seed,
        ..Default::default()
    })
    .unwrap()
    .x
}

fn small_config() -> TrainConfig {
    TrainConfig {
        rank: 3,
        quantiles: 5,
        epsilon: 0.05,
        learning_rate: 0.05,
        batch_size: Some(8),
        epochs: 6,
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn training_is_reproducible() {
    let x = small_synth(1);
    let cfg = small_config();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (m1, c1) = single.install(|| qmf_train(x.view(), &cfg)).unwrap();
    let (m2, c2) = single.install(|| qmf_train(x.view(), &cfg)).unwrap();
    assert_eq!(c1.epochs, c2.epochs);
    assert_eq!(c1.steps, c2.steps);
    assert_eq!(m1.factors, m2.factors);
    let (_, c3) = qmf_train(x.view(), &cfg).unwrap();
    for (a, b) in c1.epochs.iter().zip(&c3.epochs) {
        assert!((a - b).abs() <= 1e-6 * a.abs());
    }
    let qcfg = TrainConfig {
        batch_size: None,
        epochs: 3,
        inner_iters: 10,
        ..cfg
    };
    let (_, q1) = single.install(|| qmfq_train(x.view(), &qcfg)).unwrap();
    let (_, q2) = single.install(|| qmfq_train(x.view(), &qcfg)).unwrap();
    assert_eq!(q1.epochs, q2.epochs);
}

#[test]
fn qmfq_deflation_gradient_matches_finite_differences() {
    let mut r = rng(21);
    let (d, n, m) = (3, 5, 3);
    let x = random_data(&mut r, d, n);
    let cfg = TrainConfig {
        rank: 2,
        quantiles: m,
        epsilon: 0.1,
        inner_iters: 5,
        sinkhorn_tolerance: 1e-13,
        sinkhorn_max_iter: 1_000_000,
        seed: 2,
        ..Default::default()
    };
    let inflate = random_pinned(&mut r, &x, m);
    let mut deflate = PrecursorSet::free(d, m).unwrap();
    deflate.weights.mapv_inplace(|_| 0.3 * normal(&mut r));
    deflate.quantiles.mapv_inplace(|_| 0.3 * normal(&mut r) - 0.5);
    let g = qmfq_loss_and_grad(x.view(), &inflate, &deflate, &cfg).unwrap();
    assert_eq!(g.skipped_rows, 0);
    let fd = fd_block(&deflate.quantiles, |p| {
        let mut s = deflate.clone();
        s.quantiles = p.clone();
        qmfq_loss(x.view(), &inflate, &s, &cfg).unwrap().loss
    });
    let e = relative_error(flat(&g.deflate_quantiles).view(), flat(&fd).view());
    assert!(e < 1e-3, "{e:e}");
}

#[test]
fn qmf_point_from_a_qmfq_solution_is_no_worse() {
    let x = small_synth(3);
    let cfg = TrainConfig {
        batch_size: None,
        epochs: 8,
        inner_iters: 20,
        ..small_config()
    };
    let (model, curve) = qmfq_train(x.view(), &cfg).unwrap();
    let eval = qmfq_loss(x.view(), model.inflate.as_ref().unwrap(), model.deflate.as_ref().unwrap(), &cfg).unwrap();
    assert_eq!(eval.loss, curve.last());
    let qmf = qmf_objective(x.view(), &eval.u, &eval.v, model.inflate.as_ref().unwrap(), &cfg.sinkhorn()).unwrap();
    assert!(qmf <= eval.loss + 1e-9);
}

#[test]
fn identity_deflation_reduces_to_qmf_at_the_nmf_solution() {
    let mut r = rng(31);
    let (d, n, k) = (4, 5, 2);
    let mut deflate = PrecursorSet::free(d, n).unwrap();
    deflate.quantiles.mapv_inplace(|_| 0.05 * normal(&mut r));
    // each row of x is a permutation of its free quantiles, so at small
    // epsilon the deflating map returns x itself
    let mut x = Array2::zeros((d, n));
    for i in 0..d {
        let q = quantiles_free(deflate.quantiles.row(i)).unwrap();
        let order = argsort_ranks(&Array1::from_shape_simple_fn(n, || r.random::<f64>()));
        for (j, &o) in order.iter().enumerate() {
            x[[i, j]] = q[o];
        }
    }
    let cfg = TrainConfig {
        rank: k,
        quantiles: n,
        epsilon: 2e-3,
        inner_iters: 300,
        sinkhorn_tolerance: 1e-9,
        sinkhorn_max_iter: 1_000_000,
        seed: 5,
        ..Default::default()
    };
    let inflate = random_pinned(&mut r, &x, n);
    let eval = qmfq_loss(x.view(), &inflate, &deflate, &cfg).unwrap();
    let gap = max_abs_diff(&eval.deflated, &x);
    assert!(gap < 1e-8, "{gap:e}");

    let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
    init.set_stream(1);
    let (u0, v0) = nmf_init(d, n, k, &mut init);
    let (u, v, _, _) = unrolled_nmf(x.view(), u0, v0, cfg.inner_iters, cfg.nmf_floor, 0).unwrap();
    let qmf = qmf_objective(x.view(), &u, &v, &inflate, &cfg.sinkhorn()).unwrap();
    assert!((qmf - eval.loss).abs() < 1e-6 * qmf.max(1.0), "{qmf} vs {}", eval.loss);
}

#[test]
fn reconstruction_matches_the_model() {
    let mut x = small_synth(5);
    x.row_mut(2).fill(1.25);
    let cfg = TrainConfig {
        batch_size: None,
        epochs: 5,
        inner_iters: 10,
        ..small_config()
    };
    let (s, t) = row_ranges(x.view());
    for method in [Method::Qmf, Method::Qmfq] {
        let (model, curve) = train(method, x.view(), &cfg).unwrap();
        let z = reconstruct(&model, x.view()).unwrap();
        assert_eq!(z.dim(), x.dim());
        for (i, row) in z.axis_iter(Axis(0)).enumerate() {
            assert!(row.iter().all(|v| *v >= s[i] && *v <= t[i]), "{method:?} row {i}");
        }
        assert!(z.row(2).iter().all(|v| *v == 1.25));
        let kl = kl_div(x.view(), z.view()).unwrap();
        assert!((kl - curve.last()).abs() < 1e-9 * kl.max(1.0), "{method:?}: {kl} vs {}", curve.last());
    }
}

fn batch_curves(x: &Array2<f64>, batches: &[usize], epochs: usize, lr: f64) -> Vec<(usize, Vec<f64>)> {
    batches
        .iter()
        .map(|&b| {
            let cfg = TrainConfig {
                rank: 4,
                quantiles: 8,
                epsilon: 0.01,
                learning_rate: lr,
                batch_size: Some(b),
                epochs,
                seed: 3,
                ..Default::default()
            };
            let (_, curve) = qmf_train(x.view(), &cfg).unwrap();
            (b, curve.epochs)
        })
        .collect()
}

fn assert_epoch_descent(curves: &[(usize, Vec<f64>)]) {
    for (b, c) in curves {
        for w in c.windows(2) {
            assert!(w[1] <= 1.05 * w[0], "batch {b}: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn every_batch_size_descends_by_epoch() {
    let data = synth_generate(&SynthConfig {
        d: 64,
        n: 32,
        k: 4,
        m_star: 32,
        seed: 8,
        ..Default::default()
    })
    .unwrap();
    assert_epoch_descent(&batch_curves(&data.x, &[16, 32, 64], 10, 0.01));
}

#[test]
#[ignore = "full-size protocol, several minutes"]
fn every_batch_size_descends_by_epoch_full_size() {
    let data = synth_generate(&SynthConfig {
        d: 500,
        n: 256,
        k: 8,
        m_star: 256,
        seed: 8,
        ..Default::default()
    })
    .unwrap();
    assert_epoch_descent(&batch_curves(&data.x, &[16, 64, 500], 20, 0.01));
}

#[test]
fn large_learning_rate_is_only_logged() {
    let data = synth_generate(&SynthConfig {
        d: 48,
        n: 24,
        k: 4,
        m_star: 24,
        seed: 9,
        ..Default::default()
    })
    .unwrap();
    for (lr, (_, c)) in [0.01, 0.1].iter().zip(
        [0.01, 0.1]
            .iter()
            .flat_map(|&lr| batch_curves(&data.x, &[16], 8, lr)),
    ) {
        println!("lr {lr}: final KL {:.4}", c.last().unwrap());
    }
}
