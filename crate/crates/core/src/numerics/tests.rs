use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn mat(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn matmul_identity_and_hand_arithmetic() {
    let mut g = Graph::new();
    let i = g.input(mat(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
    let b = g.input(mat(&[&[3.0, 4.0], &[5.0, 6.0]])).unwrap();
    let y = g.matmul(i, b).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = g.input(mat(&[&[1.0, 2.0]])).unwrap();
    let c = g.input(mat(&[&[3.0], &[4.0]])).unwrap();
    let y = g.matmul(a, c).unwrap();
    assert_eq!(g.value(y).data(), &[11.0]);
}

#[test]
fn matmul_flop_delta_matches_counting_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let a = g.input(Tensor::randn(&[3, 4], 1.0, &mut rng)).unwrap();
    let b = g.input(Tensor::randn(&[4, 5], 1.0, &mut rng)).unwrap();
    // one multiply and one add per (i, k, j) triple
    let mut oracle = 0u64;
    for _i in 0..3 {
        for _k in 0..4 {
            for _j in 0..5 {
                oracle += 2;
            }
        }
    }
    let before = g.flops();
    g.matmul(a, b).unwrap();
    assert_eq!(g.flops() - before, oracle);
    assert_eq!(oracle, 120);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.input(Tensor::zeros(&[2, 3])).unwrap();
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap()).unwrap();
    let y = g.softmax(x, 0).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = g.input(Tensor::vector(vec![1000.0, 0.0]).unwrap()).unwrap();
    let y = g.softmax(x, 0).unwrap();
    assert!((g.value(y).data()[0] - 1.0).abs() < 1e-12);
    assert!(g.value(y).data()[1].abs() < 1e-12);

    let x = g.input(Tensor::vector(vec![0.5, 0.3]).unwrap()).unwrap();
    let y = g.softmax(x, 0).unwrap();
    let (ea, eb) = (0.5f64.exp(), 0.3f64.exp());
    let oracle = [ea / (ea + eb), eb / (ea + eb)];
    assert!((oracle[0] - 0.549834).abs() < 1e-6);
    for (v, o) in g.value(y).data().iter().zip(oracle) {
        assert!((v - o).abs() < 1e-15);
    }
}

#[test]
fn softmax_rejects_bad_axis() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[2, 3])).unwrap();
    assert!(g.softmax(x, 2).is_err());
}

#[test]
fn relu_cross_entropy_layer_norm_examples() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap()).unwrap();
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

    let logits = g.input(Tensor::zeros(&[3, 4])).unwrap();
    let ce = g.cross_entropy(logits, &[0, 3, 2]).unwrap();
    assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-12);
    assert!((g.value(ce).item() - 1.386294).abs() < 1e-6);
    assert!(matches!(g.cross_entropy(logits, &[0, 4, 1]), Err(crate::Error::Input(_))));

    let x = g.input(Tensor::full(&[1, 5], 3.7)).unwrap();
    let gain = g.input(Tensor::full(&[5], 1.0)).unwrap();
    let bias = g.input(Tensor::zeros(&[5])).unwrap();
    let y = g.layer_norm(x, gain, bias, LAYER_NORM_EPS).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v.abs() < 1e-12));
}

#[test]
fn non_finite_results_are_errors() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![1e300]).unwrap()).unwrap();
    let y = g.scale(x, 1e300);
    assert!(matches!(y, Err(crate::Error::NonFinite("scale"))));
}

#[test]
fn gradcheck_square() {
    let mut store = ParamStore::new();
    let theta = store.add("theta", Tensor::scalar(3.0)).unwrap();
    let report = finite_diff_check(
        &mut store,
        |g, s| {
            let t = g.param(s, theta)?;
            let sq = g.mul(t, t)?;
            g.sum_all(sq)
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    let e = &report.entries[0];
    assert_eq!(e.analytic, 6.0);
    assert!((e.numeric - 6.0).abs() < 1e-8);
    assert!(e.rel_error < 1e-10);
    assert!(report.passed());
}

#[test]
fn gradcheck_zero_gradient_under_large_objective() {
    // Column-wise softmax ignores a per-column shift, so `b` has zero gradient
    // while the objective itself is large.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let b = store.add("b", Tensor::randn(&[3], 1.0, &mut rng)).unwrap();
    let coeffs: Vec<f64> = (0..12).map(|i| 1e3 * (i as f64 - 5.5)).collect();
    let report = finite_diff_check(
        &mut store,
        |g, s| {
            let xv = g.input(x.clone())?;
            let bv = g.param(s, b)?;
            let shifted = g.add_row(xv, bv)?;
            let p = g.softmax(shifted, 0)?;
            let y = g.dot_const(p, coeffs.clone())?;
            let offset = g.input(Tensor::scalar(1e4))?;
            g.add(y, offset)
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    for e in &report.entries {
        assert!(e.analytic.abs() < 1e-9, "{e:?}");
    }
    assert!(report.passed(), "{:?}", report.worst());
    assert!((roundoff_resolution(1e4, 1e-5) - 64.0 * f64::EPSILON * 1e4 / 2e-5).abs() < 1e-18);
}

#[test]
fn gradcheck_dense_layer_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::randn(&[4, 5], 0.5, &mut rng)).unwrap();
    let b = store.add("b", Tensor::randn(&[5], 0.5, &mut rng)).unwrap();
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let report = finite_diff_check(
        &mut store,
        |g, s| {
            let xv = g.input(x.clone())?;
            let (wv, bv) = (g.param(s, w)?, g.param(s, b)?);
            let h = g.matmul(xv, wv)?;
            let logits = g.add_row(h, bv)?;
            g.cross_entropy(logits, &[1, 4, 0])
        },
        GradCheckOptions {
            tolerance: 1e-6,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_error);
    assert!(report.max_rel_error < 1e-6);
}

/// Every differentiable op, composed into one scalar, checked at 1e-5.
#[test]
fn gradcheck_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::randn(&[3, 4], 1.0, &mut rng)).unwrap();
    let b = store.add("b", Tensor::randn(&[4, 3], 1.0, &mut rng)).unwrap();
    let gain = store.add("gain", Tensor::randn(&[4], 1.0, &mut rng)).unwrap();
    let bias = store.add("bias", Tensor::randn(&[4], 1.0, &mut rng)).unwrap();
    let c = store.add("c", Tensor::randn(&[3, 3], 1.0, &mut rng)).unwrap();
    let coeffs: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
    let report = finite_diff_check(
        &mut store,
        |g, s| {
            let (av, bv, gv, biv, cv) = (g.param(s, a)?, g.param(s, b)?, g.param(s, gain)?, g.param(s, bias)?, g.param(s, c)?);
            let ln = g.layer_norm(av, gv, biv, LAYER_NORM_EPS)?;
            let h = g.matmul(ln, bv)?; // 3x3
            let sm = g.softmax(h, 0)?;
            let cs = g.causal_softmax(h)?;
            let m = g.mul(sm, cs)?;
            let t = g.transpose(m)?;
            let s1 = g.sub(t, cv)?;
            let s2 = g.scale(s1, 0.7)?;
            let r = g.relu(s2)?;
            let sl = g.slice_cols(r, 1, 2)?;
            let sr = g.slice_rows(cv, 0, 3)?;
            let cat = g.concat_cols(vec![sl, sr])?; // 3x5
            let rows = g.gather_rows(cat, vec![Some(2), None, Some(0)])?;
            let cat2 = g.concat_rows(vec![rows, cat])?; // 6x5
            let cols = g.gather_cols(cat2, (0..6).map(|i| vec![i % 5, 4 - i % 5]).collect())?; // 6x2
            let two = g.slice_rows(cols, 0, 6)?;
            let flat = g.concat_cols(vec![two, two])?; // 6x4 -> 24
            let left = g.slice_cols(flat, 0, 2)?;
            let d = g.dot_const(left, coeffs.clone())?;
            let ce = g.cross_entropy(h, &[0, 2, 1])?;
            g.add(d, ce)
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "worst {:?}", report.worst());
}

#[test]
fn combine_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let o0 = store.add("o0", Tensor::randn(&[2, 3], 1.0, &mut rng)).unwrap();
    let o1 = store.add("o1", Tensor::randn(&[2, 3], 1.0, &mut rng)).unwrap();
    let w = store.add("w", Tensor::randn(&[3, 2], 1.0, &mut rng)).unwrap();
    let x = store.add("x", Tensor::randn(&[3, 3], 1.0, &mut rng)).unwrap();
    let coeffs: Vec<f64> = (0..9).map(|i| 1.0 + i as f64).collect();
    let routes = vec![
        vec![CombineRoute { column: 0, expert: 1, slot: 0 }, CombineRoute { column: 1, expert: 0, slot: 1 }],
        vec![],
        vec![CombineRoute { column: 1, expert: 0, slot: 0 }],
    ];
    let report = finite_diff_check(
        &mut store,
        |g, s| {
            let (a, b, wv, xv) = (g.param(s, o0)?, g.param(s, o1)?, g.param(s, w)?, g.param(s, x)?);
            let y = g.combine(vec![a, b], wv, xv, routes.clone())?;
            g.dot_const(y, coeffs.clone())
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "worst {:?}", report.worst());
    // row 1 has no routes: only the residual receives gradient there
    let xg = store.value(x).grad().unwrap();
    assert_eq!(&xg[3..6], &[4.0, 5.0, 6.0]);
    assert!(xg[..3].iter().chain(&xg[6..]).all(|&v| v == 0.0));
}

/// The same function built along two different graph paths must give the
/// same gradient: `f = sum((a·b) ⊙ a·b)` versus `sum(2·(a·b)²)/2`.
#[test]
fn backward_agrees_across_constructions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = Tensor::randn(&[2, 3], 1.0, &mut rng);
    let b = Tensor::randn(&[3, 2], 1.0, &mut rng);

    let run = |two_paths: bool| {
        let mut store = ParamStore::new();
        let pa = store.add("a", a.clone()).unwrap();
        let pb = store.add("b", b.clone()).unwrap();
        let mut g = Graph::new();
        let (av, bv) = (g.param(&store, pa).unwrap(), g.param(&store, pb).unwrap());
        let loss = if two_paths {
            let y1 = g.matmul(av, bv).unwrap();
            let y2 = g.matmul(av, bv).unwrap();
            let p = g.mul(y1, y2).unwrap();
            g.sum_all(p).unwrap()
        } else {
            let y = g.matmul(av, bv).unwrap();
            let sq = g.mul(y, y).unwrap();
            let twice = g.scale(sq, 2.0).unwrap();
            let s = g.sum_all(twice).unwrap();
            g.scale(s, 0.5).unwrap()
        };
        let grads = g.backward(loss).unwrap();
        grads.accumulate_into(&g, &mut store);
        (store.value(pa).grad().unwrap().to_vec(), store.value(pb).grad().unwrap().to_vec())
    };
    let (ga1, gb1) = run(true);
    let (ga2, gb2) = run(false);
    for (x, y) in ga1.iter().zip(&ga2).chain(gb1.iter().zip(&gb2)) {
        assert!((x - y).abs() < 1e-12 * (1.0 + x.abs()));
    }
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[2, 2])).unwrap();
    assert!(g.backward(x).is_err());
}

#[test]
fn duplicate_parameter_names_rejected() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::scalar(1.0)).unwrap();
    assert!(store.add("w", Tensor::scalar(2.0)).is_err());
}

proptest! {
    #[test]
    fn softmax_sums_to_one(
        data in prop::collection::vec(-50.0f64..50.0, 12),
        axis in 0usize..3,
    ) {
        let shape = [2, 3, 2];
        let y = softmax_along(&data, &shape, axis);
        let (outer, len, inner) = match axis {
            0 => (1, 2, 6),
            1 => (2, 3, 2),
            _ => (6, 2, 1),
        };
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len).map(|a| y[(o * len + a) * inner + i]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
        prop_assert!(y.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn matmul_flops_are_exact(r in 1usize..6, s in 1usize..6, t in 1usize..6) {
        let mut g = Graph::new();
        let a = g.input(Tensor::full(&[r, s], 0.5)).unwrap();
        let b = g.input(Tensor::full(&[s, t], 0.5)).unwrap();
        let before = g.flops();
        g.matmul(a, b).unwrap();
        prop_assert_eq!(g.flops() - before, (2 * r * s * t) as u64);
    }
}
