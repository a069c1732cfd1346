use depthlab::eval::desk::{generate_desk, SuiteSizes};
use depthlab::eval::TaskItem;
use depthlab::model::{ModelConfig, TransformerModel};
use depthlab::train::{corpus_stream, corpus_windows, supervised_examples, train_teacher, TeacherConfig};
use depthlab::vocab::Vocab;

fn sizes() -> SuiteSizes {
    SuiteSizes {
        facts: 4,
        train_items: 6,
        test_items: 2,
        corpus_lines: 40,
    }
}

fn small_model(seed: u64) -> TransformerModel {
    TransformerModel::new(
        ModelConfig {
            vocab_size: Vocab::desk().len(),
            max_seq_len: 96,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            tie_embeddings: false,
        },
        seed,
    )
    .unwrap()
}

fn quick(steps: usize) -> TeacherConfig {
    TeacherConfig {
        steps,
        batch_size: 4,
        seq_len: 24,
        learning_rate: 3e-3,
        warmup_steps: 2,
        supervised_fraction: 0.5,
        clip_norm: 1.0,
        log_every: 5,
    }
}

#[test]
fn schedule_warms_up_then_decays_to_a_tenth() {
    let cfg = TeacherConfig {
        steps: 110,
        warmup_steps: 10,
        learning_rate: 1.0,
        ..TeacherConfig::default()
    };
    assert!((cfg.learning_rate_at(0) - 0.1).abs() < 1e-12);
    assert!((cfg.learning_rate_at(9) - 1.0).abs() < 1e-12);
    assert!((cfg.learning_rate_at(10) - 1.0).abs() < 1e-12);
    assert!((cfg.learning_rate_at(60) - 0.55).abs() < 1e-12);
    assert!((cfg.learning_rate_at(110) - 0.1).abs() < 1e-12);
    let lrs: Vec<f64> = (10..110).map(|s| cfg.learning_rate_at(s)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn supervised_examples_mark_the_target() {
    let vocab = Vocab::desk();
    let items = vec![TaskItem::Copy {
        prompt: "rep: ab>".into(),
        source: "ab".into(),
    }];
    let ex = supervised_examples(&items, &vocab, 64).unwrap();
    assert_eq!(ex[0].tokens, vocab.encode("rep: ab>ab\n").unwrap());
    assert_eq!(ex[0].target_start, 8);
    assert!(supervised_examples(&items, &vocab, 5).unwrap_err().is_config());
}

#[test]
fn corpus_windows_are_seeded_slices() {
    let vocab = Vocab::desk();
    let corpus = vec!["abc def.".to_string(), "ghi jk.".to_string()];
    let stream = corpus_stream(&corpus, &vocab).unwrap();
    assert_eq!(vocab.decode(&stream), "abc def.\nghi jk.\n");
    let a = corpus_windows(&corpus, &vocab, 5, 20, 1).unwrap();
    assert_eq!(a, corpus_windows(&corpus, &vocab, 5, 20, 1).unwrap());
    assert_ne!(a, corpus_windows(&corpus, &vocab, 5, 20, 2).unwrap());
    for w in &a {
        assert_eq!(w.len(), 5);
        assert!(stream.windows(5).any(|s| s == w.as_slice()));
    }
    assert!(corpus_windows(&corpus, &vocab, 100, 1, 0).unwrap_err().is_config());
}

#[test]
fn invalid_teacher_configs() {
    let bad = [
        TeacherConfig { steps: 0, ..quick(1) },
        TeacherConfig { seq_len: 1, ..quick(1) },
        TeacherConfig { learning_rate: f64::NAN, ..quick(1) },
        TeacherConfig { supervised_fraction: -0.1, ..quick(1) },
        TeacherConfig { clip_norm: -1.0, ..quick(1) },
        TeacherConfig { log_every: 0, ..quick(1) },
    ];
    for cfg in bad {
        assert!(cfg.validate().unwrap_err().is_config(), "{cfg:?}");
    }
    let data = generate_desk(0, &sizes()).unwrap();
    let long = TeacherConfig { seq_len: 200, ..quick(1) };
    assert!(train_teacher(&small_model(0), &data, &Vocab::desk(), &long, 0).unwrap_err().is_config());
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let data = generate_desk(0, &sizes()).unwrap();
    let vocab = Vocab::desk();
    let init = small_model(1);
    let (a, log) = train_teacher(&init, &data, &vocab, &quick(40), 7).unwrap();
    let (b, log_b) = train_teacher(&init, &data, &vocab, &quick(40), 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(log, log_b);
    assert_eq!(log.len(), 8);
    assert_eq!(log.last().unwrap().step, 39);
    assert!(log.iter().all(|e| e.loss.is_finite()));
    assert!(log.last().unwrap().loss < log[0].loss);
    assert_ne!(a, init);
    let (c, _) = train_teacher(&init, &data, &vocab, &quick(40), 8).unwrap();
    assert_ne!(a, c);
}
