use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn store_with(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, r, c) in shapes {
        store.insert(*name, random(*r, *c, &mut rng)).unwrap();
    }
    store
}

/// Contracts a non-scalar output with fixed random weights so every output
/// coordinate influences the checked loss.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var, crate::Error> {
    let (r, c) = tape.value(v).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tape.dot_const(v, random(r, c, &mut rng))
}

fn check(store: &mut ParamStore, f: impl FnMut(&ParamStore, &mut Tape) -> Result<Var, crate::Error>) -> f64 {
    finite_difference_check(store, f, 1e-5, None, 0).unwrap().max_rel_error
}

#[test]
fn sum_of_squares_gradient_is_two_m() {
    let mut store = store_with(&[("m", 2, 2)], 3);
    let id = store.id("m").unwrap();
    let report = finite_difference_check(
        &mut store,
        |s, t| {
            let x = t.param(s, id);
            let sq = t.mul(x, x)?;
            Ok(t.sum(sq))
        },
        1e-5,
        None,
        0,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
    let p = store.get(id);
    for (g, v) in p.gradient.as_slice().iter().zip(p.value.as_slice()) {
        assert!((g - 2.0 * v).abs() < 1e-15);
    }
}

#[test]
fn constant_loss_has_zero_gradient() {
    let mut store = store_with(&[("m", 2, 3)], 4);
    let report = finite_difference_check(&mut store, |_, t| Ok(t.leaf(Matrix::scalar(2.5))), 1e-5, None, 0).unwrap();
    assert_eq!(report.max_rel_error, 0.0);
    assert!(store.iter().all(|p| p.gradient.max_abs() == 0.0));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut t = Tape::new();
    let x = t.leaf(Matrix::zeros(2, 2));
    assert!(matches!(t.backward(x), Err(crate::Error::Contract(_))));
}

#[test]
fn matmul_and_bias_gradients() {
    let mut store = store_with(&[("a", 3, 4), ("b", 4, 2), ("bias", 1, 2)], 5);
    let ids: Vec<_> = store.ids().collect();
    let err = check(&mut store, |s, t| {
        let a = t.param(s, ids[0]);
        let b = t.param(s, ids[1]);
        let bias = t.param(s, ids[2]);
        let ab = t.matmul(a, b)?;
        let y = t.add_row(ab, bias)?;
        let yyt = t.matmul_t(y, y)?;
        project(t, yyt, 9)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn gelu_gradient() {
    let mut store = store_with(&[("x", 3, 5)], 6);
    let id = store.id("x").unwrap();
    let err = check(&mut store, |s, t| {
        let x = t.param(s, id);
        let x = t.scale(x, 3.0);
        let y = t.gelu(x);
        project(t, y, 1)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn gelu_matches_tanh_formula() {
    let x: f64 = 0.7;
    let expect = 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
    assert!((gelu(x) - expect).abs() < 1e-15);
}

#[test]
fn layer_norm_gradient() {
    let mut store = store_with(&[("x", 4, 6), ("g", 1, 6), ("b", 1, 6)], 7);
    let ids: Vec<_> = store.ids().collect();
    let err = check(&mut store, |s, t| {
        let x = t.param(s, ids[0]);
        let g = t.param(s, ids[1]);
        let b = t.param(s, ids[2]);
        let y = t.layer_norm(x, g, b, LAYER_NORM_EPS)?;
        project(t, y, 2)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn layer_norm_constant_row_is_zero_before_affine() {
    let mut t = Tape::new();
    let x = t.leaf(Matrix::filled(1, 4, 3.25));
    let g = t.leaf(Matrix::filled(1, 4, 1.0));
    let b = t.leaf(Matrix::zeros(1, 4));
    let y = t.layer_norm(x, g, b, LAYER_NORM_EPS).unwrap();
    assert!(t.value(y).as_slice().iter().all(|v| *v == 0.0));

    // direct formula on a non-constant row
    let row = [1.0, 2.0, 4.0, -3.0];
    let x = t.leaf(Matrix::from_rows(&[row]).unwrap());
    let y = t.layer_norm(x, g, b, LAYER_NORM_EPS).unwrap();
    let mean = row.iter().sum::<f64>() / 4.0;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    for (out, v) in t.value(y).as_slice().iter().zip(row) {
        assert!((out - (v - mean) / (var + LAYER_NORM_EPS).sqrt()).abs() < 1e-12);
    }
}

#[test]
fn softmax_gradient_and_values() {
    let mut t = Tape::new();
    let x = t.leaf(Matrix::zeros(1, 2));
    let y = t.softmax(x);
    assert_eq!(t.value(y).as_slice(), &[0.5, 0.5]);

    let mut store = store_with(&[("x", 3, 4)], 8);
    let id = store.id("x").unwrap();
    let err = check(&mut store, |s, t| {
        let x = t.param(s, id);
        let y = t.softmax(x);
        project(t, y, 3)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn l2_normalize_gradient_and_zero_rows() {
    let mut t = Tape::new();
    let x = t.leaf(Matrix::from_rows(&[[3.0, 4.0], [0.0, 0.0]]).unwrap());
    let y = t.l2_normalize(x);
    assert_eq!(t.value(y).as_slice(), &[0.6, 0.8, 0.0, 0.0]);

    let mut store = store_with(&[("x", 3, 4)], 9);
    let id = store.id("x").unwrap();
    let err = check(&mut store, |s, t| {
        let x = t.param(s, id);
        let y = t.l2_normalize(x);
        project(t, y, 4)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn embedding_and_gather_gradients() {
    let mut store = store_with(&[("table", 5, 3)], 10);
    let id = store.id("table").unwrap();
    let err = check(&mut store, |s, t| {
        let table = t.param(s, id);
        let e = t.embedding(table, &[4, 0, 4, 2])?;
        let g = t.gather_rows(e, &[1, 1, 3])?;
        project(t, g, 5)
    });
    assert!(err < 1e-6, "{err}");

    let mut t = Tape::new();
    let table = t.leaf(Matrix::zeros(5, 3));
    assert!(matches!(t.embedding(table, &[5]), Err(crate::Error::Index { .. })));
}

#[test]
fn cross_entropy_uniform_is_ln_v() {
    for v in [2usize, 7, 50] {
        let mut t = Tape::new();
        let logits = t.leaf(Matrix::filled(1, v, 0.3));
        let ce = t.cross_entropy(logits, &[Some(v - 1)], &[1.0], None).unwrap();
        assert!((t.scalar_value(ce).unwrap() - (v as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_label_out_of_range() {
    let mut t = Tape::new();
    let logits = t.leaf(Matrix::zeros(1, 3));
    let err = t.cross_entropy(logits, &[Some(3)], &[1.0], None).unwrap_err();
    assert!(matches!(err, crate::Error::Index { index: 3, limit: 3, .. }));
}

#[test]
fn cross_entropy_nan_logits_give_nan_not_an_error() {
    for row in [[f64::NAN, f64::NAN], [0.5, f64::NAN], [f64::NAN, 0.5]] {
        let mut t = Tape::new();
        let logits = t.leaf(Matrix::from_rows(&[&row]).unwrap());
        let ce = t.cross_entropy(logits, &[Some(0)], &[1.0], None).unwrap();
        assert!(t.scalar_value(ce).unwrap().is_nan());
    }
    let mut t = Tape::new();
    let logits = t.leaf(Matrix::zeros(1, 2));
    assert!(t
        .cross_entropy(logits, &[Some(0)], &[1.0], Some(vec![false, false]))
        .is_err());
}

#[test]
fn cross_entropy_gradient_with_mask_and_ignored_rows() {
    let mut store = store_with(&[("z", 4, 5)], 11);
    let id = store.id("z").unwrap();
    let targets = [Some(1), None, Some(4), Some(0)];
    let weights = [0.5, 0.0, 1.5, 1.0];
    let mut mask = vec![true; 20];
    mask[2] = false;
    mask[14] = false;
    mask[15] = false; // row 3 excludes its own target from the normalizer
    let err = check(&mut store, |s, t| {
        let z = t.param(s, id);
        t.cross_entropy(z, &targets, &weights, Some(mask.clone()))
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn attention_gradient_with_padding() {
    let mut store = store_with(&[("q", 7, 4), ("k", 7, 4), ("v", 7, 4)], 12);
    let ids: Vec<_> = store.ids().collect();
    let segs: Arc<[Segment]> = vec![
        Segment {
            start: 0,
            mask: vec![true, true, true, false],
        },
        Segment {
            start: 4,
            mask: vec![true, true, false],
        },
    ]
    .into();
    let err = check(&mut store, |s, t| {
        let q = t.param(s, ids[0]);
        let k = t.param(s, ids[1]);
        let v = t.param(s, ids[2]);
        let a = t.attention(q, k, v, segs.clone(), 2)?;
        project(t, a, 6)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn maxsim_gradient_shared_operand() {
    let mut store = store_with(&[("x", 9, 3)], 13);
    let id = store.id("x").unwrap();
    let segs: Arc<[Segment]> = vec![
        Segment {
            start: 0,
            mask: vec![true, true, true, false],
        },
        Segment {
            start: 4,
            mask: vec![true, true],
        },
        Segment {
            start: 6,
            mask: vec![true, false, true],
        },
    ]
    .into();
    let err = check(&mut store, |s, t| {
        let x = t.param(s, id);
        let m = t.maxsim(x, segs.clone(), x, segs.clone())?;
        project(t, m, 7)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn fault_injection_is_detected() {
    let mut store = store_with(&[("x", 3, 5)], 14);
    let id = store.id("x").unwrap();
    let report = finite_difference_check(
        &mut store,
        |s, t| {
            t.set_fault(Some(BackwardFault::Gelu));
            let x = t.param(s, id);
            let y = t.gelu(x);
            Ok(t.sum(y))
        },
        1e-5,
        None,
        0,
    )
    .unwrap();
    assert!(report.max_rel_error > 1e-3, "{report:?}");
}

#[test]
fn gradients_are_bitwise_deterministic() {
    let run = || {
        let mut store = store_with(&[("q", 6, 4), ("w", 4, 4)], 15);
        let ids: Vec<_> = store.ids().collect();
        let segs: Arc<[Segment]> = vec![Segment {
            start: 0,
            mask: vec![true; 6],
        }]
        .into();
        let mut t = Tape::new();
        let q = t.param(&store, ids[0]);
        let w = t.param(&store, ids[1]);
        let h = t.matmul(q, w).unwrap();
        let a = t.attention(h, h, h, segs, 2).unwrap();
        let loss = t.sum(a);
        let g = t.backward(loss).unwrap();
        t.accumulate_param_grads(&g, &mut store);
        store
    };
    let (a, b) = (run(), run());
    for (p, q) in a.iter().zip(b.iter()) {
        let pb: Vec<u64> = p.gradient.as_slice().iter().map(|v| v.to_bits()).collect();
        let qb: Vec<u64> = q.gradient.as_slice().iter().map(|v| v.to_bits()).collect();
        assert_eq!(pb, qb);
    }
}

fn rel_close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
    let scale = a.max_abs().max(b.max_abs()).max(1e-300);
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .all(|(x, y)| (x - y).abs() <= tol * scale)
}

proptest! {
    #[test]
    fn matmul_is_associative(seed in any::<u64>(), n in 1usize..6, m in 1usize..6, k in 1usize..6, l in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(n, m, &mut rng);
        let b = random(m, k, &mut rng);
        let c = random(k, l, &mut rng);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(rel_close(&left, &right, 1e-9));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        row in prop::collection::vec(-20.0f64..20.0, 1..12),
        shift in -50.0f64..50.0,
    ) {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_rows(&[row.clone()]).unwrap());
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let xs = t.leaf(Matrix::from_rows(&[shifted]).unwrap());
        let y = t.softmax(x);
        let ys = t.softmax(xs);
        prop_assert!((t.value(y).sum() - 1.0).abs() < 1e-12);
        for (a, b) in t.value(y).as_slice().iter().zip(t.value(ys).as_slice()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalized_rows_have_unit_norm(row in prop::collection::vec(-5.0f64..5.0, 1..10)) {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_rows(&[row.clone()]).unwrap());
        let y = t.l2_normalize(x);
        let norm: f64 = t.value(y).as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        if row.iter().all(|v| *v == 0.0) {
            prop_assert_eq!(t.value(y).as_slice(), &row[..]);
        } else {
            prop_assert!((norm - 1.0).abs() < 1e-12);
        }
    }
}
