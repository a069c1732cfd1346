use std::collections::HashMap;

use depthlab::metrics::{
    block_influence, block_influence_from_traces, choice_accuracy, copy_accuracy, exact_copy_score,
    predict_choice, rouge1, scale_boundary, token_f1, ChoiceItem, CopyItem, LanguageModel,
};
use depthlab::model::{ForwardTrace, ModelConfig, TransformerModel};
use depthlab::tensor::Tensor;
use depthlab::{Error, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn cfg(n_layers: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        max_seq_len: 32,
        d_model: 8,
        n_heads: 2,
        n_layers,
        d_ff: 16,
        tie_embeddings: false,
    }
}

fn loud_model(n_layers: usize, seed: u64) -> TransformerModel {
    let mut m = TransformerModel::new(cfg(n_layers, 13), seed).unwrap();
    for t in m.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= 25.0);
    }
    m
}

fn calibration() -> Vec<Vec<usize>> {
    vec![
        vec![1, 2, 3, 4, 5, 6],
        vec![12, 0, 7],
        vec![3, 3, 3, 3, 9, 1, 2, 8, 11],
        vec![5],
    ]
}

/// Plain nested loops over positions and coordinates.
fn bi_oracle(model: &TransformerModel, seqs: &[Vec<usize>]) -> Vec<f64> {
    let n = model.n_layers();
    let mut sums = vec![0.0; n];
    let mut count = 0usize;
    for s in seqs {
        let tr = model.forward(&[s.clone()], true).unwrap();
        let d = model.config().d_model;
        for t in 0..s.len() {
            for i in 0..n {
                let x = &tr.hidden_states[i].data()[t * d..(t + 1) * d];
                let y = &tr.hidden_states[i + 1].data()[t * d..(t + 1) * d];
                let mut dot = 0.0;
                let mut nx = 0.0;
                let mut ny = 0.0;
                for k in 0..d {
                    dot += x[k] * y[k];
                    nx += x[k] * x[k];
                    ny += y[k] * y[k];
                }
                sums[i] += dot / (nx.sqrt() * ny.sqrt());
            }
            count += 1;
        }
    }
    sums.iter().map(|s| 1.0 - s / count as f64).collect()
}

#[test]
fn bi_matches_scalar_loop() {
    let m = loud_model(2, 3);
    let report = block_influence(&m, &calibration()).unwrap();
    let oracle = bi_oracle(&m, &calibration());
    assert_eq!(report.calibration_size, 19);
    assert_eq!(report.excluded, vec![0, 0]);
    for (a, b) in report.per_layer_bi.iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
    assert!(report.per_layer_bi.iter().all(|b| (0.0..=2.0).contains(b)));
    assert!(report.per_layer_bi.iter().all(|&b| b > 1e-4));
}

#[test]
fn zero_contribution_block_has_zero_bi() {
    let mut m = loud_model(3, 4);
    m.blocks[1].zero_contribution();
    let report = block_influence(&m, &calibration()).unwrap();
    assert!(report.per_layer_bi[1].abs() <= 1e-9);
    assert!(report.per_layer_bi[0] > 0.0 && report.per_layer_bi[2] > 0.0);
}

fn trace(hidden: Vec<Vec<f64>>, d: usize) -> ForwardTrace {
    let positions = hidden[0].len() / d;
    ForwardTrace {
        logits: Tensor::zeros(vec![1, positions, 1]),
        hidden_states: hidden
            .into_iter()
            .map(|h| Tensor::new(vec![1, positions, d], h).unwrap())
            .collect(),
    }
}

#[test]
fn negating_block_has_bi_two() {
    let x = vec![0.3, -1.2, 4.0, 0.5, 0.5, 2.0];
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let r = block_influence_from_traces(&[trace(vec![x, neg], 3)]).unwrap();
    assert!((r.per_layer_bi[0] - 2.0).abs() < 1e-12);
}

#[test]
fn zero_vectors_are_excluded_and_counted() {
    let h0 = vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0];
    let h1 = vec![1.0, 1.0, 0.0, 0.0, 2.0, 0.0];
    let r = block_influence_from_traces(&[trace(vec![h0, h1], 2)]).unwrap();
    assert_eq!(r.excluded, vec![1]);
    assert_eq!(r.calibration_size, 3);
    let expected = 1.0 - (1.0 / 2f64.sqrt() + 1.0) / 2.0;
    assert!((r.per_layer_bi[0] - expected).abs() < 1e-12);

    let zeros = trace(vec![vec![0.0; 4], vec![1.0; 4]], 2);
    assert!(matches!(block_influence_from_traces(&[zeros]), Err(Error::Compute(_))));
    assert!(matches!(block_influence(&loud_model(2, 1), &[]), Err(Error::Contract(_))));
}

#[test]
fn bi_is_scale_invariant_per_boundary() {
    let m = loud_model(3, 5);
    let tr = m.forward(&[calibration()[0].clone()], true).unwrap();
    let base = block_influence_from_traces(&[tr.clone()]).unwrap();
    for boundary in 0..4 {
        for gain in [1e-3, 0.5, 7.0, 1e4] {
            let scaled = block_influence_from_traces(&[scale_boundary(&tr, boundary, gain)]).unwrap();
            for (a, b) in scaled.per_layer_bi.iter().zip(&base.per_layer_bi) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

/// Every position carries the same logits.
struct Uniform {
    vocab: usize,
}

impl LanguageModel for Uniform {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn sequence_logits(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        Ok(vec![0.0; tokens.len() * self.vocab])
    }
    fn greedy_continuation(&self, _: &[usize], max_new: usize, _: Option<usize>) -> Result<Vec<usize>> {
        Ok(vec![0; max_new])
    }
}

/// Knows the intended continuation of each prompt and puts nearly all mass on it.
struct Scripted {
    vocab: usize,
    script: HashMap<Vec<usize>, Vec<usize>>,
}

impl Scripted {
    fn full(&self, tokens: &[usize]) -> Vec<usize> {
        for (p, cont) in &self.script {
            if tokens.starts_with(p) {
                let mut f = p.clone();
                f.extend(cont);
                return f;
            }
        }
        Vec::new()
    }
}

impl LanguageModel for Scripted {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn sequence_logits(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let full = self.full(tokens);
        let mut out = vec![0.0; tokens.len() * self.vocab];
        for t in 0..tokens.len() {
            if let Some(&next) = full.get(t + 1) {
                out[t * self.vocab + next] = 50.0;
            }
        }
        Ok(out)
    }
    fn greedy_continuation(&self, prompt: &[usize], max_new: usize, _: Option<usize>) -> Result<Vec<usize>> {
        let full = self.full(prompt);
        Ok(full[prompt.len()..].iter().take(max_new).copied().collect())
    }
}

/// Adds a constant to every logit of the wrapped model.
struct Shifted<'a, M>(&'a M, f64);

impl<M: LanguageModel> LanguageModel for Shifted<'_, M> {
    fn vocab_size(&self) -> usize {
        self.0.vocab_size()
    }
    fn sequence_logits(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        Ok(self.0.sequence_logits(tokens)?.into_iter().map(|v| v + self.1).collect())
    }
    fn greedy_continuation(&self, p: &[usize], n: usize, s: Option<usize>) -> Result<Vec<usize>> {
        self.0.greedy_continuation(p, n, s)
    }
}

fn choice_items(n: usize, seed: u64) -> Vec<ChoiceItem> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| ChoiceItem {
            prompt: (0..5).map(|_| rng.gen_range(1..13)).collect(),
            options: (0..4).map(|_| (0..3).map(|_| rng.gen_range(1..13)).collect()).collect(),
            answer: i % 4,
        })
        .collect()
}

#[test]
fn uniform_model_scores_chance_with_first_option_tie_break() {
    let items = choice_items(8, 1);
    // Every option ties, so the prediction is always option 0; answers cycle 0..4.
    let hand_scored = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
    let expected = hand_scored.iter().sum::<f64>() / 8.0;
    assert_eq!(choice_accuracy(&Uniform { vocab: 13 }, &items).unwrap(), expected);
    assert_eq!(expected, 0.25);
}

#[test]
fn perfect_model_scores_one() {
    let items = choice_items(12, 2);
    let script = items
        .iter()
        .map(|it| (it.prompt.clone(), it.options[it.answer].clone()))
        .collect();
    let m = Scripted { vocab: 13, script };
    assert_eq!(choice_accuracy(&m, &items).unwrap(), 1.0);
}

fn log_softmax_naive(row: &[f64]) -> Vec<f64> {
    let z: f64 = row.iter().map(|v| v.exp()).sum();
    row.iter().map(|v| v - z.ln()).collect()
}

#[test]
fn prediction_matches_independent_scoring() {
    let m = loud_model(2, 6);
    for item in choice_items(6, 3) {
        let mut best = (0, f64::NEG_INFINITY);
        for (k, opt) in item.options.iter().enumerate() {
            let mut seq = item.prompt.clone();
            seq.extend(opt);
            let logits = m.forward(&[seq], false).unwrap().logits.into_data();
            let mut ll = 0.0;
            for (j, &tok) in opt.iter().enumerate() {
                let row = item.prompt.len() - 1 + j;
                ll += log_softmax_naive(&logits[row * 13..(row + 1) * 13])[tok];
            }
            if ll > best.1 {
                best = (k, ll);
            }
        }
        assert_eq!(predict_choice(&m, &item).unwrap(), best.0);
    }
}

#[test]
fn choice_accuracy_is_shift_invariant() {
    let m = loud_model(2, 7);
    let items = choice_items(20, 4);
    let base: Vec<usize> = items.iter().map(|i| predict_choice(&m, i).unwrap()).collect();
    for c in [-30.0, 0.0, 12.5] {
        let shifted = Shifted(&m, c);
        let got: Vec<usize> = items.iter().map(|i| predict_choice(&shifted, i).unwrap()).collect();
        assert_eq!(got, base);
    }
    assert_eq!(
        choice_accuracy(&Shifted(&m, 3.0), &items).unwrap(),
        choice_accuracy(&m, &items).unwrap()
    );
}

#[test]
fn choice_errors() {
    let m = Uniform { vocab: 5 };
    assert!(matches!(choice_accuracy(&m, &[]), Err(Error::Contract(_))));
    let one = ChoiceItem {
        prompt: vec![1],
        options: vec![vec![2]],
        answer: 0,
    };
    assert!(choice_accuracy(&m, &[one]).is_err());
}

#[test]
fn copy_scores() {
    let items: Vec<CopyItem> = (0..5)
        .map(|i| CopyItem {
            prompt: vec![1, 2, i + 3],
            source: vec![i + 3, 4, 5, 6],
        })
        .collect();
    let script = items.iter().map(|it| (it.prompt.clone(), it.source.clone())).collect();
    let perfect = Scripted { vocab: 13, script };
    assert_eq!(exact_copy_score(&perfect, &items, None).unwrap(), 1.0);

    // The uniform double always emits token 0, which never occurs in the sources.
    assert_eq!(exact_copy_score(&Uniform { vocab: 13 }, &items, None).unwrap(), 0.0);

    let mut half = Scripted {
        vocab: 13,
        script: HashMap::new(),
    };
    half.script.insert(vec![9], vec![1, 2, 7, 7]);
    let item = CopyItem {
        prompt: vec![9],
        source: vec![1, 2, 3, 4],
    };
    assert_eq!(copy_accuracy(&half, &item, None).unwrap(), 0.5);

    let mut with_empty = items.clone();
    with_empty.push(CopyItem {
        prompt: vec![1],
        source: vec![],
    });
    assert_eq!(exact_copy_score(&perfect, &with_empty, None).unwrap(), 1.0);
    let empties = vec![CopyItem {
        prompt: vec![1],
        source: vec![],
    }];
    assert!(matches!(exact_copy_score(&perfect, &empties, None), Err(Error::Contract(_))));
}

#[test]
fn untrained_model_copies_at_chance() {
    let vocab = 48;
    let m = TransformerModel::new(
        ModelConfig {
            vocab_size: vocab,
            max_seq_len: 64,
            ..cfg(2, vocab)
        },
        9,
    )
    .unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let items: Vec<CopyItem> = (0..200)
        .map(|_| {
            let source: Vec<usize> = (0..12).map(|_| rng.gen_range(1..vocab)).collect();
            let mut prompt = vec![1];
            prompt.extend(&source);
            prompt.push(2);
            CopyItem { prompt, source }
        })
        .collect();
    let score = exact_copy_score(&m, &items, None).unwrap();
    assert!((score - 1.0 / vocab as f64).abs() < 0.03, "{score}");
}

#[test]
fn overlap_metrics() {
    assert_eq!(token_f1(&["a", "b"], &["b", "c"]).unwrap(), 0.5);
    assert_eq!(rouge1(&["a", "b"], &["b", "c"]).unwrap(), 0.5);
    assert_eq!(token_f1(&["x", "y"], &["x", "y"]).unwrap(), 1.0);
    assert_eq!(rouge1(&["x", "y"], &["x", "y"]).unwrap(), 1.0);
    assert_eq!(token_f1(&["p"], &["q"]).unwrap(), 0.0);
    assert_eq!(rouge1::<&str>(&[], &["q"]).unwrap(), 0.0);
    assert_eq!(token_f1::<&str>(&[], &["q"]).unwrap(), 0.0);
    assert!(token_f1(&["q"], &[]).is_err());
    assert!(rouge1(&["q"], &[]).is_err());
    // Clipping: a repeated candidate token counts only as often as in the reference.
    assert_eq!(rouge1(&["a", "a", "a"], &["a", "b"]).unwrap(), 0.5);
    let f = token_f1(&["a", "a", "a"], &["a", "b"]).unwrap();
    let (p, r) = (1.0 / 3.0, 0.5);
    assert!((f - 2.0 * p * r / (p + r)).abs() < 1e-15);
}

proptest! {
    #[test]
    fn overlap_metrics_are_bounded(
        cand in proptest::collection::vec(0u8..6, 0..12),
        reference in proptest::collection::vec(0u8..6, 1..12),
    ) {
        let f = token_f1(&cand, &reference).unwrap();
        let r = rouge1(&cand, &reference).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert_eq!(token_f1(&reference, &reference).unwrap(), 1.0);
    }

    #[test]
    fn bi_stays_in_range(
        data in proptest::collection::vec(-5.0f64..5.0, 36),
    ) {
        let hidden: Vec<Vec<f64>> = data.chunks(12).map(|c| c.to_vec()).collect();
        if let Ok(r) = block_influence_from_traces(&[trace(hidden, 3)]) {
            prop_assert!(r.per_layer_bi.iter().all(|b| (0.0..=2.0).contains(b)));
        }
    }
}
