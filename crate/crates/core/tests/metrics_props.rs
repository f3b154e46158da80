use proptest::prelude::*;

use sinklab::metrics::{
    attention_deviations, contraction_check, eigen_bound_check, head_layer_average, outer_degrees, AttentionMatrix,
};
use sinklab::numeric::matrix::row_softmax;
use sinklab::numeric::Matrix;
use sinklab::trace::AttentionTrace;

fn attention(n: usize, scale: f64, logits: &[f64]) -> AttentionMatrix {
    let m = Matrix::from_fn(n, n, |i, j| scale * logits[i * n + j]);
    AttentionMatrix::new(row_softmax(&m)).unwrap()
}

prop_compose! {
    fn attention_of(n: usize)(scale in 0.01f64..10.0, logits in prop::collection::vec(-3.0f64..3.0, n * n))
        -> AttentionMatrix {
        attention(n, scale, &logits)
    }
}

fn any_attention() -> impl Strategy<Value = AttentionMatrix> {
    (2usize..10).prop_flat_map(attention_of)
}

prop_compose! {
    fn attention_and_hidden()(a in any_attention(), d in 1usize..6)
        (h in prop::collection::vec(-5.0f64..5.0, a.n() * d), a in Just(a), d in Just(d))
        -> (AttentionMatrix, Matrix) {
        let n = a.n();
        (a, Matrix::from_vec(n, d, h).unwrap())
    }
}

fn permute_rows(a: &AttentionMatrix, perm: &[usize]) -> AttentionMatrix {
    let m = a.matrix();
    AttentionMatrix::new(Matrix::from_fn(a.n(), a.n(), |i, j| m[(perm[i], j)])).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn degrees_sum_to_one(a in any_attention()) {
        let total: f64 = outer_degrees(&a).iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12, "sum {}", total);
    }

    #[test]
    fn query_order_does_not_matter(a in any_attention(), seed in any::<u64>()) {
        let n = a.n();
        let mut perm: Vec<usize> = (0..n).collect();
        // Fisher-Yates with a tiny LCG keeps the shrinker working on `seed`.
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let b = permute_rows(&a, &perm);
        for (x, y) in outer_degrees(&a).iter().zip(outer_degrees(&b)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in attention_deviations(&a).iter().zip(attention_deviations(&b)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn deviations_are_non_negative(a in any_attention()) {
        prop_assert!(attention_deviations(&a).iter().all(|d| *d >= 0.0 && d.is_finite()));
    }

    #[test]
    fn eigen_bound_holds(a in any_attention()) {
        let r = eigen_bound_check(&a).unwrap();
        prop_assert!(r.lambda_max >= r.bound_rhs - 1e-9);
        prop_assert!(r.bound_rhs >= 0.0);
    }

    #[test]
    fn contraction_holds((a, h) in attention_and_hidden()) {
        let r = contraction_check(&a, &h).unwrap();
        prop_assert!(r.holds, "lhs {} rhs {}", r.lhs, r.rhs);
    }

    #[test]
    fn identical_rows_give_zero_bound(n in 2usize..10, logits in prop::collection::vec(-3.0f64..3.0, 10)) {
        let row = row_softmax(&Matrix::row_vector(&logits[..n]));
        let a = AttentionMatrix::new(Matrix::from_fn(n, n, |_, j| row[(0, j)])).unwrap();
        let r = eigen_bound_check(&a).unwrap();
        prop_assert_eq!(r.bound_rhs, 0.0);
        prop_assert!(r.lambda_max.abs() < 1e-12);
        prop_assert!(attention_deviations(&a).iter().all(|d| *d == 0.0));
    }

    #[test]
    fn distinct_rows_give_positive_bound(a in any_attention()) {
        let m = a.matrix();
        let distinct = (1..a.n()).any(|i| m.row(i) != m.row(0));
        let r = eigen_bound_check(&a).unwrap();
        prop_assert_eq!(distinct, r.bound_rhs > 0.0);
    }

    #[test]
    fn mixing_toward_a_sink_raises_its_degree(a in any_attention(), sink_pick in any::<prop::sample::Index>()) {
        let n = a.n();
        let sink = sink_pick.index(n);
        let target = AttentionMatrix::pure_sink(n, sink);
        let mut last = f64::NEG_INFINITY;
        for step in 0..=10 {
            let t = step as f64 / 10.0;
            let mixed = a.matrix().scale(1.0 - t).add(&target.matrix().scale(t));
            let d = outer_degrees(&AttentionMatrix::new(mixed).unwrap())[sink];
            prop_assert!(d >= last - 1e-12);
            last = d;
        }
        prop_assert!((last - 1.0).abs() < 1e-12);
    }

    #[test]
    fn head_average_matches_loops(
        heads in (2usize..10).prop_flat_map(|n| prop::collection::vec(attention_of(n), 1..5)),
    ) {
        let n = heads[0].n();
        let trace = AttentionTrace {
            model_name: "t".into(),
            attentions: vec![heads.clone()],
            hidden_states: Vec::new(),
            tokens: (0..n).map(|i| i.to_string()).collect(),
            common_positions: Vec::new(),
        };
        let stats = &head_layer_average(&trace).unwrap()[0];
        for i in 0..n {
            let mut deg = 0.0;
            let mut dev = 0.0;
            for a in &heads {
                let m = a.matrix();
                let d: f64 = (0..n).map(|k| m[(k, i)]).sum::<f64>() / n as f64;
                let ss: f64 = (0..n).map(|k| (m[(k, i)] - d).powi(2)).sum();
                deg += d;
                dev += if d > 0.0 { ss.sqrt() / (n as f64 * d) } else { 0.0 };
            }
            let h = heads.len() as f64;
            prop_assert!((stats.outer_degrees[i] - deg / h).abs() < 1e-12);
            prop_assert!((stats.deviations[i] - dev / h).abs() < 1e-12);
        }
    }
}
