use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

use sinklab::numeric::eigen::dominant_eigenvalue;
use sinklab::numeric::matrix::row_softmax;
use sinklab::numeric::{Matrix, Optimizer, ParamStore, Tape};

fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Matrix {
    Matrix::from_vec(rows, cols, values).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_rows_are_distributions(values in prop::collection::vec(-50.0f64..50.0, 1..40), width in 1usize..8) {
        let rows = values.len().div_ceil(width);
        let mut padded = values.clone();
        padded.resize(rows * width, 0.0);
        let p = row_softmax(&matrix(rows, width, padded));
        for i in 0..rows {
            let s: f64 = p.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.row(i).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn softmax_ignores_row_shifts(values in prop::collection::vec(-20.0f64..20.0, 2..12), shift in -500.0f64..500.0) {
        let n = values.len();
        let a = row_softmax(&Matrix::row_vector(&values));
        let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
        let b = row_softmax(&Matrix::row_vector(&shifted));
        prop_assert!(a.max_abs_diff(&b) < 1e-12, "n = {}", n);
    }

    #[test]
    fn dominant_eigenvalue_matches_dense(values in prop::collection::vec(-2.0f64..2.0, 64)) {
        let g = matrix(8, 8, values);
        let s = g.matmul_t(&g);
        let dense = DMatrix::from_fn(8, 8, |i, j| s[(i, j)]);
        let expected = SymmetricEigen::new(dense).eigenvalues.max();
        let got = dominant_eigenvalue(&s).unwrap();
        prop_assert!((got.value - expected).abs() <= 1e-8 * expected.max(1.0),
            "power {} dense {}", got.value, expected);
    }

    #[test]
    fn transposed_products_agree(a in prop::collection::vec(-3.0f64..3.0, 12), b in prop::collection::vec(-3.0f64..3.0, 20)) {
        let a = matrix(3, 4, a);
        let b = matrix(5, 4, b);
        prop_assert!(a.matmul_t(&b).max_abs_diff(&a.matmul(&b.transpose())) < 1e-12);
        prop_assert!(b.t_matmul(&b).max_abs_diff(&b.transpose().matmul(&b)) < 1e-12);
    }
}

#[test]
fn adam_drives_a_quadratic_to_its_minimum() {
    let target = matrix(2, 3, vec![1.5, -2.0, 0.25, 3.0, -0.5, 0.0]);
    let mut store = ParamStore::new();
    store.insert("x", Matrix::zeros(2, 3));
    for _ in 0..2000 {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let t = tape.constant(target.clone());
        let diff = tape.sub(b.id("x"), t);
        let sq = tape.hadamard(diff, diff);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        store.step(&b.gradients(&grads), 0.05, Optimizer::default()).unwrap();
    }
    assert!(store.get("x").unwrap().max_abs_diff(&target) < 1e-3);
    assert_eq!(store.param("x").unwrap().steps(), 2000);
}

#[test]
fn plain_gradient_descent_matches_hand_update() {
    let mut store = ParamStore::new();
    store.insert("x", matrix(1, 2, vec![1.0, -1.0]));
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let sq = tape.hadamard(b.id("x"), b.id("x"));
    let loss = tape.sum_all(sq);
    let grads = tape.backward(loss).unwrap();
    store.step(&b.gradients(&grads), 0.1, Optimizer::Sgd).unwrap();
    // x ← x − 0.1 · 2x
    assert_eq!(store.get("x").unwrap().data(), &[0.8, -0.8]);
}
