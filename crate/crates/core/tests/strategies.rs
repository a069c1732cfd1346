use std::collections::BTreeMap;

use depthlab::distill::DistillConfig;
use depthlab::eval::desk::{calibration_sample, generate_desk, task_specs, SuiteSizes};
use depthlab::eval::{evaluate, EvalMode, EvalReport, ImportanceMethod, TaskSpec};
use depthlab::model::{load_model, ModelConfig, TrainablePolicy, TransformerModel};
use depthlab::par;
use depthlab::strategies::{
    compare_runs, histogram_csv, removed_layer_statistics, run_strategy, PruneRun, RunStatus, StrategyInputs,
    StrategyKind,
};
use depthlab::train::corpus_windows;
use depthlab::vocab::{TokenId, Vocab};

struct Fixture {
    suite: Vec<TaskSpec>,
    corpus: Vec<Vec<TokenId>>,
    calibration: Vec<Vec<TokenId>>,
    distill: DistillConfig,
}

fn fixture() -> Fixture {
    let sizes = SuiteSizes {
        facts: 6,
        train_items: 6,
        test_items: 4,
        corpus_lines: 40,
    };
    let data = generate_desk(2, &sizes).unwrap();
    let vocab = Vocab::desk();
    Fixture {
        suite: task_specs(&data, &vocab, 0.5, 2).unwrap(),
        corpus: corpus_windows(&data.corpus, &vocab, 16, 12, 2).unwrap(),
        calibration: calibration_sample(&data.corpus, &vocab, 4, 2).unwrap(),
        distill: DistillConfig {
            steps: 3,
            batch_size: 2,
            max_seq_len: 16,
            learning_rate: 1e-3,
            trainable_policy: TrainablePolicy::AdjacentToRemoved { radius: 1 },
            ..DistillConfig::default()
        },
    }
}

impl Fixture {
    fn inputs<'a>(&'a self, teacher: &'a TransformerModel, protected: &'a [usize]) -> StrategyInputs<'a> {
        StrategyInputs {
            teacher,
            suite: &self.suite,
            corpus: &self.corpus,
            calibration: &self.calibration,
            distill: &self.distill,
            protected,
        }
    }
}

fn model(n_layers: usize, seed: u64) -> TransformerModel {
    let mut m = TransformerModel::new(
        ModelConfig {
            vocab_size: Vocab::desk().len(),
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

/// Scales each block's residual writes so Block Influence increases with depth.
fn graded(n_layers: usize) -> TransformerModel {
    let mut m = model(n_layers, 9);
    for (i, block) in m.blocks.iter_mut().enumerate() {
        block.scale_contribution(10f64.powi(i as i32 - n_layers as i32));
    }
    m
}

fn check_run_invariants(run: &PruneRun, teacher: &TransformerModel) {
    let n = teacher.n_layers();
    assert_eq!(run.per_step.len(), run.k);
    assert_eq!(run.removal_order.len(), run.k);
    let mut seen = run.removal_order.clone();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), run.k);
    for (i, step) in run.per_step.iter().enumerate() {
        assert_eq!(step.layers_remaining, n - i - 1);
        assert_eq!(step.removed_layer, run.removal_order[i]);
        assert_eq!(step.finetune_log.is_some(), run.strategy.fine_tunes());
        let method = if run.strategy.uses_evaluation() {
            ImportanceMethod::EvalDrop
        } else {
            ImportanceMethod::Bi
        };
        assert_eq!(step.importance.method, method);
    }
    assert_eq!(run.teacher_fingerprint, teacher.fingerprint());
    assert_eq!(run.status, RunStatus::Complete);
}

#[test]
fn zero_block_is_removed_by_bi_strategies() {
    let f = fixture();
    let teacher = model(3, 1).insert_identity_block(2, 0).unwrap();
    let before = teacher.fingerprint();
    for kind in StrategyKind::ALL {
        let run = run_strategy(kind, 1, f.inputs(&teacher, &[]), 4, None).unwrap();
        check_run_invariants(&run, &teacher);
        let step = &run.per_step[0];
        let zero = step.importance.per_layer.iter().find(|s| s.layer == 2).unwrap();
        assert_eq!(zero.importance, 0.0, "{kind}");
        if kind.uses_evaluation() {
            // Untrained blocks can help or hurt, so only the minimum is pinned.
            let least = step.importance.per_layer.iter().map(|s| s.importance).fold(f64::INFINITY, f64::min);
            assert!(least <= 0.0);
        } else {
            assert_eq!(run.removal_order, vec![2], "{kind}");
        }
    }
    assert_eq!(teacher.fingerprint(), before);
}

#[test]
fn short_gpt_removes_in_one_pass() {
    let f = fixture();
    let teacher = model(5, 2);
    let run = run_strategy(StrategyKind::ShortGPT, 2, f.inputs(&teacher, &[]), 0, None).unwrap();
    check_run_invariants(&run, &teacher);
    assert_eq!(run.per_step[0].importance, run.per_step[1].importance);
    let ranking = run.per_step[0].importance.ranking();
    assert_eq!(run.removal_order, ranking[..2].to_vec());
    let direct = teacher.remove_layers(&run.removal_order).unwrap();
    assert_eq!(run.per_step[1].eval, evaluate(&direct, &f.suite, EvalMode::Full).unwrap());
}

#[test]
fn iterative_bi_matches_short_gpt_on_monotone_profile() {
    let f = fixture();
    let teacher = graded(5);
    let one_shot = run_strategy(StrategyKind::ShortGPT, 3, f.inputs(&teacher, &[]), 0, None).unwrap();
    let iterative = run_strategy(StrategyKind::IterativeBI, 3, f.inputs(&teacher, &[]), 0, None).unwrap();
    assert_eq!(one_shot.removal_order, vec![0, 1, 2]);
    assert_eq!(iterative.removal_order, one_shot.removal_order);
    assert_eq!(iterative.per_step[2].eval, one_shot.per_step[2].eval);
    assert_ne!(iterative.per_step[1].importance, one_shot.per_step[1].importance);
}

#[test]
fn protected_layers_survive() {
    let f = fixture();
    let teacher = graded(4);
    for kind in StrategyKind::ALL {
        let run = run_strategy(kind, 2, f.inputs(&teacher, &[0]), 1, None).unwrap();
        assert!(!run.removal_order.contains(&0), "{kind}: {:?}", run.removal_order);
        check_run_invariants(&run, &teacher);
    }
    let bi = run_strategy(StrategyKind::IterativeBI, 2, f.inputs(&teacher, &[1]), 1, None).unwrap();
    assert_eq!(bi.removal_order, vec![0, 2]);
}

#[test]
fn run_directory_round_trips() {
    let f = fixture();
    let teacher = model(4, 3);
    let dir = tempfile::tempdir().unwrap();
    for kind in [StrategyKind::IterativeLayerwiseDistillation, StrategyKind::ShortGPT] {
        let sub = dir.path().join(kind.to_string());
        let run = run_strategy(kind, 2, f.inputs(&teacher, &[]), 5, Some(&sub)).unwrap();
        assert_eq!(PruneRun::load(&sub).unwrap(), run);
        let last = load_model(&sub.join(run.final_model_path.as_ref().unwrap())).unwrap();
        assert_eq!(last.n_layers(), 2);
        let mut expected: Vec<usize> = (0..4).filter(|l| !run.removal_order.contains(l)).collect();
        expected.sort_unstable();
        assert_eq!(last.provenance(), expected.as_slice());
        assert_eq!(evaluate(&last, &f.suite, EvalMode::Full).unwrap(), run.per_step[1].eval);
        for step in &run.per_step {
            let ckpt = load_model(&sub.join(step.checkpoint.as_ref().unwrap())).unwrap();
            assert_eq!(ckpt.n_layers(), step.layers_remaining);
        }
    }
}

#[test]
fn failing_run_leaves_partial_record() {
    let mut f = fixture();
    f.corpus.truncate(1);
    let teacher = model(3, 3);
    let dir = tempfile::tempdir().unwrap();
    let err = run_strategy(StrategyKind::IterativeBIPlusFT, 2, f.inputs(&teacher, &[]), 0, Some(dir.path()))
        .unwrap_err();
    assert!(err.is_config());
    let partial = PruneRun::load(dir.path()).unwrap();
    assert!(matches!(partial.status, RunStatus::Failed { .. }));
    assert!(partial.per_step.is_empty());
}

#[test]
fn invalid_requests_are_config_errors() {
    let f = fixture();
    let teacher = model(3, 3);
    for (k, protected) in [(0, vec![]), (3, vec![]), (1, vec![3]), (2, vec![0, 1])] {
        let err = run_strategy(StrategyKind::IterativeBI, k, f.inputs(&teacher, &protected), 0, None).unwrap_err();
        assert!(err.is_config(), "k={k} protected={protected:?}");
    }
}

#[test]
fn runs_are_deterministic_across_worker_counts() {
    let f = fixture();
    let teacher = model(4, 6);
    for kind in [StrategyKind::IterativeLayerwiseDistillation, StrategyKind::IterativeBIPlusFT] {
        let a = par::with_workers(1, || run_strategy(kind, 2, f.inputs(&teacher, &[]), 8, None).unwrap());
        let b = par::with_workers(3, || run_strategy(kind, 2, f.inputs(&teacher, &[]), 8, None).unwrap());
        assert_eq!(a, b);
        let c = run_strategy(kind, 2, f.inputs(&teacher, &[]), 9, None).unwrap();
        assert_ne!(a.per_step[1].finetune_log, c.per_step[1].finetune_log);
    }
}

fn fake_run(strategy: StrategyKind, seed: u64, removal_order: Vec<usize>, aggregates: &[f64]) -> PruneRun {
    let report = |a: f64| {
        let per_task: BTreeMap<String, f64> = [("t".to_string(), a)].into_iter().collect();
        EvalReport::from_scores(per_task, String::new(), EvalMode::Full).unwrap()
    };
    let importance = depthlab::eval::LayerImportanceReport {
        method: ImportanceMethod::Bi,
        per_layer: vec![],
        least_important: 0,
        protected: vec![],
        baseline_aggregate: None,
    };
    PruneRun {
        strategy,
        k: removal_order.len(),
        seed,
        teacher_fingerprint: String::new(),
        teacher_layers: 8,
        protected: vec![],
        distill: DistillConfig::default(),
        baseline: report(0.9),
        per_step: removal_order
            .iter()
            .zip(aggregates)
            .enumerate()
            .map(|(i, (&l, &a))| depthlab::strategies::PruneStep {
                layers_remaining: 7 - i,
                removed_layer: l,
                importance: importance.clone(),
                finetune_log: None,
                eval: report(a),
                checkpoint: None,
            })
            .collect(),
        removal_order,
        final_model_path: None,
        status: RunStatus::Complete,
    }
}

#[test]
fn removed_layer_histogram() {
    let one = fake_run(StrategyKind::IterativeBI, 0, vec![3, 5], &[0.5, 0.4]);
    let stats = removed_layer_statistics(std::slice::from_ref(&one)).unwrap();
    assert_eq!(stats[&StrategyKind::IterativeBI], BTreeMap::from([(3, 1), (5, 1)]));
    let runs = vec![
        one.clone(),
        fake_run(StrategyKind::IterativeBI, 1, vec![5, 6], &[0.5, 0.4]),
        fake_run(StrategyKind::ShortGPT, 0, vec![6], &[0.2]),
    ];
    let stats = removed_layer_statistics(&runs).unwrap();
    assert_eq!(stats[&StrategyKind::IterativeBI], BTreeMap::from([(3, 1), (5, 2), (6, 1)]));
    let total: usize = stats.values().flat_map(|h| h.values()).sum();
    assert_eq!(total, runs.iter().map(|r| r.removal_order.len()).sum::<usize>());
    assert_eq!(
        histogram_csv(&stats),
        "strategy,original_layer,count\nShortGPT,6,1\nIterativeBI,3,1\nIterativeBI,5,2\nIterativeBI,6,1\n"
    );
    assert_eq!(stats, removed_layer_statistics(&runs).unwrap());
    assert!(removed_layer_statistics(&[]).is_err());
}

#[test]
fn comparison_tables() {
    let single = compare_runs(&[fake_run(StrategyKind::IterativeBI, 0, vec![4], &[0.5])]);
    assert_eq!(single.finals.len(), 1);
    assert_eq!(single.curve_csv(), "layers_removed,strategy,aggregate\n0,IterativeBI,0.9\n1,IterativeBI,0.5\n");

    let runs: Vec<PruneRun> = StrategyKind::ALL
        .iter()
        .enumerate()
        .map(|(i, &k)| fake_run(k, 0, vec![1, 2], &[0.6, 0.1 * i as f64]))
        .collect();
    let table = compare_runs(&runs);
    assert_eq!(table.finals.len(), 5);
    for (row, run) in table.finals.iter().zip(&runs) {
        assert_eq!(row.aggregate, run.per_step[1].eval.aggregate);
    }
    let csv = table.table_csv();
    assert_eq!(csv.lines().count(), 6);
    assert_eq!(csv.lines().next().unwrap(), "strategy,seed,layers_remaining,t,aggregate");
    assert_eq!(table.curve.len(), 15);
    assert_eq!(table.mean_final()[&StrategyKind::IterativeBI], 0.1);
    let json = serde_json::to_string(&table).unwrap();
    assert_eq!(serde_json::from_str::<depthlab::strategies::Comparison>(&json).unwrap(), table);
}
