use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sinklab::cl::{make_synthetic_sequence, SequenceConfig};
use sinklab::encoder::{EncoderConfig, ForwardOptions, PretrainConfig, TransformerEncoder};
use sinklab::metrics::outer_degrees;
use sinklab::numeric::Matrix;
use sinklab::prescale::{ClassHead, ClassifierModel, HeadVariant, ScalingLayer, StageConfig};

fn small(layers: usize, sink_bias: f64) -> EncoderConfig {
    EncoderConfig {
        layers,
        heads: 2,
        model_dim: 16,
        ff_dim: 32,
        vocab_size: 24,
        max_seq_len: 10,
        sink_bias,
        sink_positions: vec![0, 1],
        seed: 3,
    }
}

prop_compose! {
    fn tokens_and_mask()(n in 2usize..10)
        (tokens in prop::collection::vec(0usize..24, n), keep in prop::collection::vec(any::<bool>(), n))
        -> (Vec<usize>, Vec<usize>) {
        let dropped = keep.iter().enumerate().filter(|(_, k)| !**k).map(|(i, _)| i).collect();
        (tokens, dropped)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_stay_stochastic(beta in 0.0f64..40.0, (tokens, dropped) in tokens_and_mask()) {
        let enc = TransformerEncoder::new(small(3, beta)).unwrap();
        let opts = ForwardOptions { dropped_positions: dropped.clone(), ..ForwardOptions::default() };
        let (h, trace) = enc.forward_with_trace_opts(&tokens, &opts).unwrap();
        prop_assert!(h.is_finite());
        for layer in &trace.attentions {
            for a in layer {
                for i in 0..a.n() {
                    let s: f64 = a.matrix().row(i).iter().sum();
                    prop_assert!((s - 1.0).abs() <= 1e-9);
                    if dropped.len() < tokens.len() {
                        prop_assert!(dropped.iter().all(|&j| a.matrix()[(i, j)] == 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn scaled_attention_rows_are_distributions(
        values in prop::collection::vec(-2.0f64..2.0, 6 * 4 + 3 * 4 + 4 * 4 + 4),
        positions in prop::collection::vec(0usize..8, 1..4),
    ) {
        let (h, rest) = values.split_at(24);
        let (v, rest) = rest.split_at(12);
        let (w, b) = rest.split_at(16);
        let layer = ScalingLayer {
            class_vectors: Matrix::from_vec(3, 4, v.to_vec()).unwrap(),
            weight: Matrix::from_vec(4, 4, w.to_vec()).unwrap(),
            bias: b.to_vec(),
        };
        let h = Matrix::from_vec(6, 4, h.to_vec()).unwrap();
        let full = layer.scaled_attention(&h).unwrap();
        for i in 0..3 {
            prop_assert!((full.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(full.row(i).iter().all(|x| *x > 0.0));
        }
        let support: Vec<usize> = positions.iter().copied().filter(|&p| p < 6).collect();
        match layer.sink_only_attention(&h, &positions) {
            Ok(sink) => {
                for i in 0..3 {
                    prop_assert!((sink.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    for j in 0..6 {
                        prop_assert_eq!(support.contains(&j), sink[(i, j)] > 0.0);
                    }
                }
            }
            Err(_) => prop_assert!(support.is_empty()),
        }
    }
}

#[test]
fn post_norm_outputs_are_standardized_at_init() {
    let enc = TransformerEncoder::new(small(2, 0.0)).unwrap();
    let h = enc.forward(&[0, 5, 9, 13, 2], &ForwardOptions::default()).unwrap();
    for i in 0..h.rows() {
        let row = h.row(i);
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / row.len() as f64;
        assert!(mean.abs() < 1e-9, "row {i} mean {mean}");
        assert!((var - 1.0).abs() < 1e-9, "row {i} variance {var}");
    }
}

#[test]
fn sink_bias_leaves_the_first_layer_alone_and_concentrates_later_ones() {
    let tokens = [0, 1, 7, 9, 11, 13];
    let (_, plain) = TransformerEncoder::new(small(3, 0.0)).unwrap().forward_with_trace(&tokens).unwrap();
    let (_, biased) = TransformerEncoder::new(small(3, 8.0)).unwrap().forward_with_trace(&tokens).unwrap();
    assert_eq!(plain.attentions[0], biased.attentions[0]);
    for l in 1..3 {
        for (a, b) in plain.attentions[l].iter().zip(&biased.attentions[l]) {
            let (da, db) = (outer_degrees(a), outer_degrees(b));
            assert!(db[0] + db[1] > da[0] + da[1]);
            assert!(db[0] + db[1] > 0.9);
        }
    }
}

#[test]
fn pretraining_reduces_masked_token_loss() {
    let mut enc = TransformerEncoder::new(small(2, 0.0)).unwrap();
    let corpus: Vec<Vec<usize>> = (0..16).map(|i| (0..8).map(|p| 4 + (i + 3 * p) % 19).collect()).collect();
    let cfg = PretrainConfig {
        steps: 150,
        lr: 3e-3,
        batch_size: 8,
        mask_prob: 0.25,
        ..PretrainConfig::default()
    };
    let report = enc.pretrain_sink_free(&corpus, &cfg).unwrap();
    let head: f64 = report.losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = report.losses[report.losses.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.5 * head, "loss {head} -> {tail}");
}

#[test]
fn classifier_fits_a_small_training_set() {
    let seq_cfg = SequenceConfig {
        num_tasks: 1,
        classes_per_task: vec![4],
        train_per_class: 8,
        ..SequenceConfig::default()
    };
    let enc_cfg = EncoderConfig {
        vocab_size: 64,
        ..small(2, 0.0)
    };
    let sequence = make_synthetic_sequence(&seq_cfg, enc_cfg.vocab_size, enc_cfg.model_dim).unwrap();
    let task = &sequence.tasks[0];
    for variant in [HeadVariant::RegularCls, HeadVariant::PrescaleFull] {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = ClassifierModel::new(TransformerEncoder::new(enc_cfg.clone()).unwrap(), variant.clone()).unwrap();
        model.head.add_task(task.classes, &mut rng).unwrap();
        let stages = StageConfig {
            finetune_lr: 3e-3,
            finetune_epochs: 30,
            batch_size: 8,
            ..StageConfig::default()
        };
        model.finetune_stage(&task.train, &[0], &stages, &mut rng).unwrap();
        let acc = model.accuracy(&task.train, &[0], 0).unwrap();
        assert!(acc >= 0.9, "{variant:?} train accuracy {acc}");
    }
}

#[test]
fn uniform_head_spreads_class_attention_evenly() {
    let mut head = ClassHead::new(HeadVariant::Uniform, 4).unwrap();
    head.add_task(3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let h = Matrix::filled(5, 4, 0.3);
    let a = head.attention(&h, &[0]).unwrap();
    assert_eq!(a.shape(), (3, 5));
    assert!(a.data().iter().all(|x| (x - 0.2).abs() < 1e-15));
}
