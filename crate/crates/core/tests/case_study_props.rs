use proptest::prelude::*;

use sinklab::case_study::{
    decompose_representation, generate_pair, interference_autodiff, interference_closed_form, interference_sweep,
    PairConfig, SweepConfig,
};
use sinklab::numeric::matrix::dot;

prop_compose! {
    fn pair_config()(k in 0usize..3, n1 in 4usize..10, n2 in 4usize..10, extra in 0usize..6)
        (degree in 0.0f64..=(if k == 0 { 0.0 } else { 1.0 / k as f64 }),
         deviation in 0.0f64..=1.0,
         k in Just(k), n1 in Just(n1), n2 in Just(n2), extra in Just(extra))
        -> PairConfig {
        PairConfig {
            n1,
            n2,
            dim: k + 2 + 2 * extra,
            common_count: k,
            sink_degree: degree,
            deviation_scale: deviation,
            contamination: 0.0,
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn task_specific_parts_are_orthogonal(cfg in pair_config(), seed in any::<u64>()) {
        let pair = generate_pair(&cfg, seed).unwrap();
        let d1 = decompose_representation(&pair.first).unwrap();
        let d2 = decompose_representation(&pair.second).unwrap();
        prop_assert!(dot(&d1.r, &d2.r).abs() <= 1e-12);
    }

    #[test]
    fn overlap_comes_from_common_tokens(cfg in pair_config(), seed in any::<u64>()) {
        let pair = generate_pair(&cfg, seed).unwrap();
        let b1 = pair.first.representation().unwrap();
        let b2 = pair.second.representation().unwrap();
        let d1 = decompose_representation(&pair.first).unwrap();
        let d2 = decompose_representation(&pair.second).unwrap();
        let c1: Vec<f64> = d1.s.iter().zip(&d1.delta).map(|(s, d)| s + d).collect();
        let c2: Vec<f64> = d2.s.iter().zip(&d2.delta).map(|(s, d)| s + d).collect();
        prop_assert!((dot(&b1, &b2) - dot(&c1, &c2)).abs() <= 1e-9);
        if cfg.common_count == 0 {
            prop_assert!(dot(&b1, &b2).abs() <= 1e-12);
        }
    }

    #[test]
    fn closed_form_matches_autodiff_on_generated_pairs(cfg in pair_config(), seed in any::<u64>()) {
        let pair = generate_pair(&cfg, seed).unwrap();
        let closed = interference_closed_form(&pair.first, &pair.second, &pair.params).unwrap();
        let auto = interference_autodiff(&pair.first, &pair.second, &pair.params).unwrap();
        prop_assert!((closed - auto).abs() <= 1e-8 * closed.abs().max(auto.abs()).max(1e-12));
    }

    #[test]
    fn interference_grows_with_sink_degree(seed in any::<u64>(), k in 1usize..3) {
        let mut last = 0.0;
        for step in 0..=8 {
            let cfg = PairConfig {
                common_count: k,
                sink_degree: step as f64 / 8.0 / k as f64,
                deviation_scale: 0.0,
                ..PairConfig::default()
            };
            let pair = generate_pair(&cfg, seed).unwrap();
            let i = interference_closed_form(&pair.first, &pair.second, &pair.params).unwrap().abs();
            prop_assert!(i >= last * (1.0 - 1e-9), "step {}: {} < {}", step, i, last);
            last = i;
        }
    }
}

#[test]
fn sweep_grid_is_complete_and_baseline_is_flat() {
    let cfg = SweepConfig::default();
    let (rows, summary) = interference_sweep(&cfg).unwrap();
    assert_eq!(rows.len(), summary.iter().map(|s| s.seeds).sum::<usize>());
    let zero: Vec<_> = rows.iter().filter(|r| r.sink_degree == 0.0).collect();
    assert!(!zero.is_empty());
    assert!(zero.iter().all(|r| r.interference.abs() <= 1e-12));
}
