use std::collections::BTreeMap;

use depthlab::eval::desk::{self, generate_desk, read_desk, task_specs, SuiteSizes, TASK_NAMES};
use depthlab::eval::{
    aggregate, build_desk_suite, evaluate, evaluate_with, importance_by_bi, importance_by_evaluation,
    least_important_of, EvalMode, EvalReport, ImportanceMethod, LayerScore, Metric, TaskItem, TaskKind, TaskSpec,
};
use depthlab::metrics::block_influence;
use depthlab::model::{ModelConfig, TransformerModel};
use depthlab::par;
use depthlab::vocab::Vocab;
use depthlab::Error;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn sizes() -> SuiteSizes {
    SuiteSizes {
        facts: 8,
        train_items: 10,
        test_items: 8,
        corpus_lines: 60,
    }
}

fn suite(probe_fraction: f64) -> Vec<TaskSpec> {
    let data = generate_desk(5, &sizes()).unwrap();
    task_specs(&data, &Vocab::desk(), probe_fraction, 5).unwrap()
}

fn model(n_layers: usize, seed: u64) -> TransformerModel {
    let mut m = TransformerModel::new(
        ModelConfig {
            vocab_size: 48,
            max_seq_len: 64,
            d_model: 8,
            n_heads: 2,
            n_layers,
            d_ff: 16,
            tie_embeddings: false,
        },
        seed,
    )
    .unwrap();
    for t in m.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= 30.0);
    }
    m
}

fn report(scores: &[f64]) -> EvalReport {
    let per_task: BTreeMap<String, f64> = scores
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("task{i}"), *s))
        .collect();
    EvalReport::from_scores(per_task, String::new(), EvalMode::Full).unwrap()
}

#[test]
fn aggregate_reproduces_published_rows() {
    let rows: [(&[f64], f64); 7] = [
        (&[0.68, 0.565, 0.241, 1.0, 0.99, 0.445, 0.534], 0.636),
        (&[0.622, 0.465, 0.223, 1.0, 1.0, 0.39, 0.51], 0.601),
        (&[0.281, 0.293, 0.145, 0.02, 0.04, 0.164, 0.283], 0.175),
        (&[0.285, 0.256, 0.037, 0.03, 0.01, 0.135, 0.244], 0.142),
        (&[0.594, 0.467, 0.004, 0.0, 0.0, 0.01, 0.178], 0.179),
        (&[0.405, 0.355, 0.169, 0.16, 0.5, 0.387, 0.485], 0.352),
        (&[0.562, 0.458, 0.204, 0.95, 0.98, 0.381, 0.481], 0.574),
    ];
    for (scores, published) in rows {
        let r = report(scores);
        assert!((r.aggregate - published).abs() <= 0.0005, "{} vs {published}", r.aggregate);
    }
}

#[test]
fn single_task_aggregate_is_the_score() {
    assert_eq!(report(&[0.37]).aggregate, 0.37);
    assert!(aggregate(&[]).is_err());
}

proptest! {
    #[test]
    fn aggregate_is_the_mean(scores in proptest::collection::vec(0.0f64..=1.0, 1..12)) {
        let r = report(&scores);
        let mean = r.per_task.values().sum::<f64>() / r.per_task.len() as f64;
        prop_assert!((r.aggregate - mean).abs() < 1e-12);
    }
}

fn dir_hashes(dir: &std::path::Path) -> BTreeMap<String, String> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            let bytes = std::fs::read(e.path()).unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                format!("{:x}", Sha256::digest(bytes)),
            )
        })
        .collect()
}

#[test]
fn suite_files_are_seed_deterministic() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let specs = build_desk_suite(11, &sizes(), 0.25, a.path()).unwrap();
    build_desk_suite(11, &sizes(), 0.25, b.path()).unwrap();
    build_desk_suite(12, &sizes(), 0.25, c.path()).unwrap();
    let (ha, hb, hc) = (dir_hashes(a.path()), dir_hashes(b.path()), dir_hashes(c.path()));
    assert_eq!(ha, hb);
    assert_ne!(ha, hc);
    assert_eq!(ha.len(), 8);
    assert_eq!(ha.keys().filter(|k| k.ends_with(".jsonl")).count(), 7);
    assert!(ha.contains_key(desk::CORPUS_FILE));
    assert_eq!(specs.len(), 7);
    assert_eq!(read_desk(a.path()).unwrap(), generate_desk(11, &sizes()).unwrap());
}

#[test]
fn suite_structure() {
    let data = generate_desk(3, &sizes()).unwrap();
    let names: Vec<&str> = data.tasks.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names, TASK_NAMES);
    let vocab = Vocab::desk();
    for t in &data.tasks {
        assert_eq!(t.test.len(), 8);
        assert_eq!(t.train.len(), 10);
        for item in t.train.iter().chain(&t.test) {
            vocab.encode(&item.training_text()).unwrap();
            assert!(item.prompt().ends_with('>'));
            match item {
                TaskItem::Copy { prompt, source } => {
                    assert_eq!(item.target(), source);
                    assert!(prompt.contains(source.as_str()));
                }
                TaskItem::Choice { options, .. } => {
                    assert_eq!(options.len(), 4);
                    assert!(options.iter().all(|o| o.len() == options[0].len()));
                }
                TaskItem::Generate { reference, .. } => assert!(!reference.is_empty()),
            }
        }
    }
    let fact_a = &data.tasks[0].test[0];
    let fact_b = &data.tasks[1].test[0];
    assert_ne!(fact_a.prompt(), fact_b.prompt());
    assert!(sizes_err(SuiteSizes { train_items: 0, ..sizes() }));
    assert!(sizes_err(SuiteSizes { facts: 0, ..sizes() }));
}

fn sizes_err(s: SuiteSizes) -> bool {
    generate_desk(1, &s).unwrap_err().is_config()
}

#[test]
fn full_size_probe_equals_full() {
    let full_probe = suite(1.0);
    let m = model(2, 1);
    let a = evaluate(&m, &full_probe, EvalMode::Full).unwrap();
    let b = evaluate(&m, &full_probe, EvalMode::Probe).unwrap();
    assert_eq!(a.per_task, b.per_task);
    assert_eq!(a.aggregate, b.aggregate);
    let quarter = suite(0.25);
    assert!(quarter.iter().all(|t| t.probe_subset_size == 2 && t.probe_indices().len() == 2));
    assert_eq!(evaluate(&m, &quarter, EvalMode::Full).unwrap().per_task, a.per_task);
    for r in [&a, &b] {
        assert!(r.per_task.values().all(|s| (0.0..=1.0).contains(s)));
    }
}

#[test]
fn task_metric_mismatch_is_a_config_error() {
    let items = vec![TaskItem::Copy {
        prompt: "copy: ab>".into(),
        source: "ab".into(),
    }];
    let r = TaskSpec::new("x", TaskKind::CopyDoc, Metric::Accuracy, items.clone(), 1, 0, &Vocab::desk());
    assert!(r.err().unwrap().is_config());
    let r = TaskSpec::new("x", TaskKind::MultipleChoice, Metric::Accuracy, items.clone(), 1, 0, &Vocab::desk());
    assert!(r.err().unwrap().is_config());
    let r = TaskSpec::new("x", TaskKind::CopyDoc, Metric::ExactCopy, items, 2, 0, &Vocab::desk());
    assert!(r.err().unwrap().is_config());
    assert!(evaluate(&model(2, 1), &[], EvalMode::Full).unwrap_err().is_config());
}

fn scores(values: &[f64]) -> Vec<LayerScore> {
    values
        .iter()
        .enumerate()
        .map(|(layer, &importance)| LayerScore {
            layer,
            original_layer: layer,
            importance,
            per_task: None,
        })
        .collect()
}

#[test]
fn least_important_breaks_ties_low() {
    let s = scores(&[0.3, 0.1, 0.0, 0.2, 0.5, 0.0]);
    assert_eq!(least_important_of(&s, &[]).unwrap(), 2);
    assert_eq!(least_important_of(&s, &[2]).unwrap(), 5);
    assert_eq!(least_important_of(&scores(&[-0.1, -0.1]), &[]).unwrap(), 0);
    assert!(least_important_of(&s[..1], &[0]).unwrap_err().is_config());
}

#[test]
fn zero_block_has_zero_drop() {
    let tasks = suite(0.5);
    let mut m = model(4, 2);
    m.blocks[0].zero_contribution();
    let r = importance_by_evaluation(&m, &tasks, &[]).unwrap();
    assert_eq!(r.method, ImportanceMethod::EvalDrop);
    assert_eq!(r.per_layer[0].importance, 0.0);
    assert!(r.per_layer[0].per_task.as_ref().unwrap().values().all(|&d| d == 0.0));
    // A random block may even hurt, so only the sign of the winner is fixed.
    let least = &r.per_layer[r.least_important];
    assert!(least.importance <= 0.0);
}

#[test]
fn evaluation_importance_matches_sequential_recomputation() {
    let tasks = suite(0.5);
    let m = model(4, 3);
    let parallel = par::with_workers(3, || importance_by_evaluation(&m, &tasks, &[1]).unwrap());
    let single = par::with_workers(1, || importance_by_evaluation(&m, &tasks, &[1]).unwrap());
    assert_eq!(parallel, single);

    let base = evaluate_with(&m, String::new(), &tasks, EvalMode::Probe).unwrap().aggregate;
    assert_eq!(parallel.baseline_aggregate, Some(base));
    let layers: Vec<usize> = parallel.per_layer.iter().map(|s| s.layer).collect();
    assert_eq!(layers, vec![0, 2, 3]);
    let mut best = (usize::MAX, f64::INFINITY);
    for s in &parallel.per_layer {
        let v = evaluate_with(&m.remove_layer(s.layer).unwrap(), String::new(), &tasks, EvalMode::Probe).unwrap();
        assert_eq!(s.importance, base - v.aggregate);
        if s.importance < best.1 {
            best = (s.layer, s.importance);
        }
    }
    assert_eq!(parallel.least_important, best.0);
}

#[test]
fn evaluation_importance_errors() {
    let tasks = suite(0.5);
    let m = model(2, 4);
    assert!(importance_by_evaluation(&m, &tasks, &[0, 1]).unwrap_err().is_config());
    let one = m.remove_layer(0).unwrap();
    assert!(matches!(importance_by_evaluation(&one, &tasks, &[]), Err(Error::Contract(_))));
}

#[test]
fn bi_importance_delegates() {
    let m = {
        let mut m = model(4, 5);
        m.blocks[2].zero_contribution();
        m
    };
    let calib = desk::calibration_sample(&generate_desk(1, &sizes()).unwrap().corpus, &Vocab::desk(), 6, 1).unwrap();
    assert_eq!(calib.len(), 6);
    let r = importance_by_bi(&m, &calib, &[]).unwrap();
    let direct = block_influence(&m, &calib).unwrap();
    let values: Vec<f64> = r.per_layer.iter().map(|s| s.importance).collect();
    assert_eq!(values, direct.per_layer_bi);
    assert!(values.iter().all(|v| (0.0..=2.0).contains(v)));
    assert_eq!(r.least_important, 2);
    assert_eq!(r.ranking()[0], 2);
    let guarded = importance_by_bi(&m, &calib, &[2]).unwrap();
    assert_ne!(guarded.least_important, 2);
    assert!(!guarded.ranking().contains(&2));
}
