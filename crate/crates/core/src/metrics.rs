//! Block Influence and the per-task quality metrics.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Decoder, ForwardTrace, TransformerModel};
use crate::par;
use crate::tensor::{kernels, Tensor};
use crate::vocab::TokenId;

/// What the task metrics need from a model.
pub trait LanguageModel: Sync {
    fn vocab_size(&self) -> usize;

    /// Next-token logits for every position, `[len, vocab]` row-major.
    fn sequence_logits(&self, tokens: &[TokenId]) -> Result<Vec<f64>>;

    /// Greedy continuation, at most `max_new` tokens, ending early after `stop`.
    fn greedy_continuation(&self, prompt: &[TokenId], max_new: usize, stop: Option<TokenId>) -> Result<Vec<TokenId>>;

    /// Total log-likelihood of each option given the prompt.
    fn option_log_likelihoods(&self, prompt: &[TokenId], options: &[Vec<TokenId>]) -> Result<Vec<f64>> {
        let v = self.vocab_size();
        options
            .iter()
            .map(|opt| {
                let mut seq = prompt.to_vec();
                seq.extend_from_slice(&opt[..opt.len() - 1]);
                let logits = self.sequence_logits(&seq)?;
                let mut lp = vec![0.0; v];
                let mut total = 0.0;
                for (j, &tok) in opt.iter().enumerate() {
                    let row = prompt.len() - 1 + j;
                    kernels::log_softmax_row(&logits[row * v..(row + 1) * v], &mut lp);
                    total += lp[tok];
                }
                Ok(total)
            })
            .collect()
    }
}

impl LanguageModel for TransformerModel {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn sequence_logits(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.forward(&[tokens.to_vec()], false)?.logits.into_data())
    }

    fn greedy_continuation(&self, prompt: &[TokenId], max_new: usize, stop: Option<TokenId>) -> Result<Vec<TokenId>> {
        self.generate_greedy(prompt, max_new, stop)
    }

    /// Runs the prompt once and branches the decoder cache per option.
    fn option_log_likelihoods(&self, prompt: &[TokenId], options: &[Vec<TokenId>]) -> Result<Vec<f64>> {
        let v = self.config().vocab_size;
        let mut base = Decoder::new(self);
        let mut first = Vec::new();
        for &t in prompt {
            first = base.push(t)?;
        }
        let mut lp = vec![0.0; v];
        options
            .iter()
            .map(|opt| {
                let mut dec = base.clone();
                let mut logits = first.clone();
                let mut total = 0.0;
                for (j, &tok) in opt.iter().enumerate() {
                    if tok >= v {
                        return Err(Error::Index {
                            what: "vocabulary",
                            index: tok,
                            bound: v,
                        });
                    }
                    kernels::log_softmax_row(&logits, &mut lp);
                    total += lp[tok];
                    if j + 1 < opt.len() {
                        logits = dec.push(tok)?;
                    }
                }
                Ok(total)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BIReport {
    pub per_layer_bi: Vec<f64>,
    /// Number of (sequence, position) pairs in the calibration batch.
    pub calibration_size: usize,
    /// Pairs skipped per layer because a hidden vector had zero norm.
    pub excluded: Vec<usize>,
}

/// Cosine similarity; `None` if either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = kernels::dot(a, a);
    let nb = kernels::dot(b, b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((kernels::dot(a, b) / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// BI from captured hidden states. Each trace contributes every position of
/// every sequence in its batch.
pub fn block_influence_from_traces(traces: &[ForwardTrace]) -> Result<BIReport> {
    let first = traces
        .first()
        .ok_or_else(|| Error::contract("block influence needs at least one trace"))?;
    if first.hidden_states.len() < 2 {
        return Err(Error::contract("traces carry no hidden states"));
    }
    let n_layers = first.hidden_states.len() - 1;
    let mut sums = vec![0.0; n_layers];
    let mut counts = vec![0usize; n_layers];
    let mut excluded = vec![0usize; n_layers];
    let mut calibration_size = 0;
    for tr in traces {
        if tr.hidden_states.len() != n_layers + 1 {
            return Err(Error::contract("traces disagree on layer count"));
        }
        let d = *tr.hidden_states[0].shape().last().expect("hidden state has a width");
        let positions = tr.hidden_states[0].numel() / d;
        calibration_size += positions;
        for i in 0..n_layers {
            let (x, y) = (tr.hidden_states[i].data(), tr.hidden_states[i + 1].data());
            for p in 0..positions {
                match cosine(&x[p * d..(p + 1) * d], &y[p * d..(p + 1) * d]) {
                    Some(c) => {
                        sums[i] += c;
                        counts[i] += 1;
                    }
                    None => excluded[i] += 1,
                }
            }
        }
    }
    let per_layer_bi = (0..n_layers)
        .map(|i| {
            if counts[i] == 0 {
                Err(Error::Compute(format!("every position has a zero hidden state at layer {i}")))
            } else {
                Ok(1.0 - sums[i] / counts[i] as f64)
            }
        })
        .collect::<Result<_>>()?;
    Ok(BIReport {
        per_layer_bi,
        calibration_size,
        excluded,
    })
}

pub fn block_influence(model: &TransformerModel, calibration: &[Vec<TokenId>]) -> Result<BIReport> {
    if calibration.is_empty() || calibration.iter().any(Vec::is_empty) {
        return Err(Error::contract("calibration needs non-empty sequences"));
    }
    let traces = par::map(calibration, |seq| model.forward(&[seq.clone()], true));
    let traces = traces.into_iter().collect::<Result<Vec<_>>>()?;
    block_influence_from_traces(&traces)
}

/// Hidden states scaled by `gain` at one boundary; used to probe BI invariances.
pub fn scale_boundary(trace: &ForwardTrace, boundary: usize, gain: f64) -> ForwardTrace {
    let mut out = trace.clone();
    let h = &mut out.hidden_states[boundary];
    let scaled: Vec<f64> = h.data().iter().map(|v| v * gain).collect();
    *h = Tensor::new(h.shape().to_vec(), scaled).expect("same shape");
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceItem {
    pub prompt: Vec<TokenId>,
    pub options: Vec<Vec<TokenId>>,
    pub answer: usize,
}

/// Index of the option with the highest total log-likelihood; the lowest
/// index wins ties.
pub fn predict_choice<M: LanguageModel + ?Sized>(model: &M, item: &ChoiceItem) -> Result<usize> {
    if item.options.len() < 2 {
        return Err(Error::contract("a choice item needs at least two options"));
    }
    if item.prompt.is_empty() || item.options.iter().any(Vec::is_empty) {
        return Err(Error::contract("prompt and options must be non-empty"));
    }
    let scores = model.option_log_likelihoods(&item.prompt, &item.options)?;
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn choice_accuracy<M: LanguageModel + ?Sized>(model: &M, items: &[ChoiceItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::contract("choice accuracy over zero items"));
    }
    let hits = par::map(items, |item| predict_choice(model, item).map(|p| p == item.answer));
    let mut correct = 0usize;
    for h in hits {
        correct += h? as usize;
    }
    Ok(correct as f64 / items.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CopyItem {
    pub prompt: Vec<TokenId>,
    pub source: Vec<TokenId>,
}

/// Fraction of source positions reproduced by a greedy decode of at most
/// `source.len()` tokens; an early `stop` leaves the rest unmatched.
pub fn copy_accuracy<M: LanguageModel + ?Sized>(model: &M, item: &CopyItem, stop: Option<TokenId>) -> Result<f64> {
    let out = model.greedy_continuation(&item.prompt, item.source.len(), stop)?;
    let hits = out.iter().zip(&item.source).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / item.source.len() as f64)
}

/// Mean per-item character accuracy; empty sources are skipped.
pub fn exact_copy_score<M: LanguageModel + ?Sized>(model: &M, items: &[CopyItem], stop: Option<TokenId>) -> Result<f64> {
    let live: Vec<&CopyItem> = items.iter().filter(|i| !i.source.is_empty()).collect();
    if live.is_empty() {
        return Err(Error::contract("exact copy score needs a non-empty source"));
    }
    let scores = par::map(&live, |item| copy_accuracy(model, item, stop));
    let mut total = 0.0;
    for s in scores {
        total += s?;
    }
    Ok(total / live.len() as f64)
}

fn counts<T: Hash + Eq>(xs: &[T]) -> HashMap<&T, usize> {
    let mut m = HashMap::new();
    for x in xs {
        *m.entry(x).or_insert(0) += 1;
    }
    m
}

/// Clipped unigram overlap between candidate and reference.
fn overlap<T: Hash + Eq>(candidate: &[T], reference: &[T]) -> usize {
    let r = counts(reference);
    counts(candidate)
        .into_iter()
        .map(|(tok, c)| c.min(r.get(tok).copied().unwrap_or(0)))
        .sum()
}

pub fn token_f1<T: Hash + Eq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::contract("token F1 needs a non-empty reference"));
    }
    let hits = overlap(candidate, reference);
    if hits == 0 {
        return Ok(0.0);
    }
    let p = hits as f64 / candidate.len() as f64;
    let r = hits as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// ROUGE-1 recall.
pub fn rouge1<T: Hash + Eq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::contract("ROUGE-1 needs a non-empty reference"));
    }
    Ok(overlap(candidate, reference) as f64 / reference.len() as f64)
}
