mod common;

use common::*;
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::Rng;
use softquant::factor::{train, LossCurve, Method, TrainConfig};
use softquant::io::{matrix_from_csv, matrix_to_csv, read_matrix, write_matrix, QuantileTable, RunReport};
use softquant::synth::{ground_truth_quantile, hard_quantile_normalize, synth_generate, SynthConfig};
use softquant::Error;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn csv_round_trip_is_bit_exact(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (d, n) = (r.random_range(0..6), r.random_range(0..6));
        let m = Array2::from_shape_simple_fn((d, n), || {
            let e = r.random_range(-300..300);
            normal(&mut r) * 10f64.powi(e)
        });
        let back = matrix_from_csv(&matrix_to_csv(m.view())).unwrap();
        prop_assert_eq!(back.dim(), m.dim());
        for (a, b) in m.iter().zip(back.iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let mut r = rng(1);
    let m = Array2::from_shape_simple_fn((3, 4), || r.random::<f64>());
    write_matrix(&path, m.view()).unwrap();
    assert_eq!(read_matrix(&path).unwrap(), m);
    assert!(matches!(read_matrix(dir.path().join("missing.csv")), Err(Error::Io(_))));
}

#[test]
fn header_must_match_the_body() {
    for (text, line) in [("3,2\n1,2\n3,4\n", 4), ("2,3\n1,2\n3,4\n", 2), ("1,2\n1,2\n3,4\n", 3)] {
        match matrix_from_csv(text) {
            Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
            other => panic!("expected a parse error for {text:?}, got {other:?}"),
        }
    }
}

#[test]
fn report_json_round_trips() {
    let data = synth_generate(&SynthConfig {
        d: 6,
        n: 8,
        k: 2,
        m_star: 8,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        rank: 2,
        quantiles: 4,
        epsilon: 0.05,
        epochs: 3,
        inner_iters: 5,
        ..Default::default()
    };
    let (model, curve) = train(Method::Qmfq, data.x.view(), &cfg).unwrap();
    let report = RunReport {
        method: Method::Qmfq,
        config: cfg.clone(),
        rows: 6,
        cols: 8,
        final_kl: curve.last(),
        inflate: Some(QuantileTable::from_set(model.inflate.as_ref().unwrap()).unwrap()),
        deflate: Some(QuantileTable::from_set(model.deflate.as_ref().unwrap()).unwrap()),
        curve,
        seconds: 0.25,
        threads: 1,
        model,
    };
    let back = RunReport::from_json(&report.to_json().unwrap()).unwrap();
    assert_eq!(back, report);

    let table = back.inflate.unwrap();
    let levels = table.levels();
    for (lv, q) in levels.axis_iter(Axis(0)).zip(table.quantiles.axis_iter(Axis(0))) {
        assert!(lv.iter().all(|v| *v > 0.0 && *v <= 1.0 + 1e-12));
        assert!((lv[lv.len() - 1] - 1.0).abs() < 1e-12);
        assert!(lv.windows(2).into_iter().all(|w| w[1] >= w[0]));
        assert!(q.windows(2).into_iter().all(|w| w[1] >= w[0]));
    }
}

#[test]
fn empty_curve_reports_its_initial_loss() {
    let c = LossCurve {
        initial: 4.0,
        ..Default::default()
    };
    assert_eq!(c.last(), 4.0);
}

#[test]
fn toy_family_shapes() {
    let data = synth_generate(&SynthConfig {
        seed: 7,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(data.x.dim(), (160, 80));
    assert_eq!(data.u_star.dim(), (160, 8));
    assert_eq!(data.v_star.dim(), (8, 80));
    assert_eq!(data.q_star.dim(), (160, 80));
    for i in 0..160 {
        let mut row = data.x.row(i).to_vec();
        row.sort_by(f64::total_cmp);
        assert_eq!(row, data.q_star.row(i).to_vec());
    }
}

#[test]
fn noise_is_nonnegative_and_seeded() {
    let cfg = SynthConfig {
        d: 10,
        n: 12,
        k: 3,
        m_star: 6,
        noise_sigma: 10.0,
        seed: 2,
        ..Default::default()
    };
    let noisy = synth_generate(&cfg).unwrap();
    let clean = synth_generate(&SynthConfig { noise_sigma: 0.0, ..cfg.clone() }).unwrap();
    assert!((&noisy.x - &clean.x).iter().all(|v| *v >= 0.0));
    assert!((&noisy.x - &clean.x).iter().any(|v| *v > 0.0));
    assert_eq!(synth_generate(&cfg).unwrap().x, noisy.x);
    assert!(synth_generate(&SynthConfig { d: 0, ..cfg.clone() }).is_err());
    assert!(synth_generate(&SynthConfig { noise_sigma: -1.0, ..cfg }).is_err());
}

#[test]
fn hard_normalization_and_ground_truth_quantiles() {
    let q = ndarray::array![1.0, 2.0, 3.0];
    let w = ndarray::array![0.5, -1.0, 2.0, 0.0, 0.7, 0.6];
    // ranks 2,0,5,1,4,3 -> quantile index ceil((r+1)/2) - 1
    assert_eq!(hard_quantile_normalize(w.view(), q.view()), ndarray::array![2.0, 1.0, 3.0, 1.0, 3.0, 2.0]);
    assert_eq!(ground_truth_quantile(q.view(), 1.0 / 3.0), 1.0);
    assert_eq!(ground_truth_quantile(q.view(), 0.34), 2.0);
    assert_eq!(ground_truth_quantile(q.view(), 1.0), 3.0);
    assert_eq!(ground_truth_quantile(q.view(), 0.0), 1.0);
}
