use std::path::PathBuf;

use sinklab::cl::{run_experiment, sink_masking_experiment, EvalMode, ExperimentConfig, Strategy};
use sinklab::io::load_experiment_config;

fn masking_config() -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/sink_masking.toml");
    load_experiment_config(path).unwrap()
}

#[test]
fn separate_models_learn_every_task() {
    let cfg = ExperimentConfig {
        strategies: vec![Strategy::Separate, Strategy::Mtl],
        seeds: vec![0, 1],
        ..masking_config()
    };
    let report = run_experiment(&cfg).unwrap();
    let separate = report.report(Strategy::Separate).unwrap();
    let aware = separate.mode(EvalMode::TaskAware);
    assert!(aware.acc >= 0.9, "separate ACC {}", aware.acc);
    assert_eq!(aware.fgt, Some(0.0));

    let mtl = report.report(Strategy::Mtl).unwrap();
    assert!(mtl.mode(EvalMode::TaskAware).acc >= 0.9);
    assert_eq!(mtl.mode(EvalMode::TaskAware).fgt, None);
}

#[test]
fn a_strategy_does_not_depend_on_its_neighbours() {
    let mut cfg = ExperimentConfig {
        strategies: vec![Strategy::Ft],
        seeds: vec![4],
        ..ExperimentConfig::default()
    };
    cfg.sequence.train_per_class = 8;
    cfg.sequence.test_per_class = 8;
    cfg.stages.finetune_epochs = 1;
    let alone = run_experiment(&cfg).unwrap();
    cfg.strategies = vec![Strategy::Prescale, Strategy::Ft];
    let together = run_experiment(&cfg).unwrap();
    assert_eq!(alone.report(Strategy::Ft), together.report(Strategy::Ft));
}

#[test]
fn accuracy_matrices_are_complete_and_bounded() {
    let mut cfg = ExperimentConfig {
        strategies: vec![Strategy::Ft, Strategy::PtFt, Strategy::Prescale],
        seeds: vec![0],
        ..ExperimentConfig::default()
    };
    cfg.sequence.train_per_class = 8;
    cfg.sequence.test_per_class = 8;
    cfg.stages.finetune_epochs = 1;
    let report = run_experiment(&cfg).unwrap();
    for r in &report.reports {
        for run in &r.runs {
            for m in [&run.task_aware, &run.task_agnostic] {
                for t in 0..m.tasks() {
                    for j in 0..=t {
                        let v = m.get(t, j).expect("lower triangle filled");
                        assert!((0.0..=1.0).contains(&v));
                    }
                }
            }
        }
        // One boundary before the first task and one after each task.
        assert_eq!(r.boundaries.len(), cfg.sequence.num_tasks + 1);
    }
}

#[test]
fn masking_needs_a_sequential_strategy() {
    assert!(sink_masking_experiment(&masking_config(), Strategy::Mtl).is_err());
}
