//! Teacher pre-training on the desk corpus and task training splits.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::desk::DeskData;
use crate::eval::TaskItem;
use crate::model::TransformerModel;
use crate::rng;
use crate::tensor::{AdamConfig, AdamState, Tape};
use crate::vocab::{TokenId, Vocab, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Window length for corpus batches.
    pub seq_len: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Share of batches drawn from task training items instead of the corpus.
    pub supervised_fraction: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    pub log_every: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            steps: 3000,
            batch_size: 16,
            seq_len: 64,
            learning_rate: 2e-3,
            warmup_steps: 100,
            supervised_fraction: 0.75,
            clip_norm: 1.0,
            log_every: 50,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.seq_len < 2 || self.log_every == 0 {
            return Err(Error::config(
                "teacher training needs steps, batch_size and log_every > 0 and seq_len >= 2",
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("teacher learning_rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.supervised_fraction) {
            return Err(Error::config("supervised_fraction must lie in [0, 1]"));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::config("clip_norm must be non-negative"));
        }
        Ok(())
    }

    /// Learning rate after linear warmup and cosine decay to a tenth.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.steps - self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub loss: f64,
    pub learning_rate: f64,
}

/// A supervised example: tokens plus the positions whose next token is scored.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: Vec<TokenId>,
    /// Index of the first target token.
    pub target_start: usize,
}

pub fn supervised_examples(items: &[TaskItem], vocab: &Vocab, max_len: usize) -> Result<Vec<Example>> {
    items
        .iter()
        .map(|item| {
            let tokens = vocab.encode(&item.training_text())?;
            if tokens.len() > max_len {
                return Err(Error::config(format!(
                    "training item of {} tokens exceeds max_seq_len {max_len}",
                    tokens.len()
                )));
            }
            let target_start = vocab.encode(item.prompt())?.len();
            Ok(Example { tokens, target_start })
        })
        .collect()
}

/// Corpus lines joined by newlines into one token stream.
pub fn corpus_stream(corpus: &[String], vocab: &Vocab) -> Result<Vec<TokenId>> {
    let mut text = corpus.join("\n");
    text.push('\n');
    vocab.encode(&text)
}

/// `count` seeded windows of `len` tokens from the corpus stream.
pub fn corpus_windows(corpus: &[String], vocab: &Vocab, len: usize, count: usize, seed: u64) -> Result<Vec<Vec<TokenId>>> {
    let stream = corpus_stream(corpus, vocab)?;
    if len == 0 || stream.len() < len {
        return Err(Error::config(format!(
            "corpus of {} tokens cannot supply windows of {len}",
            stream.len()
        )));
    }
    let mut rng = rng::stream(seed, "corpus/windows");
    Ok((0..count)
        .map(|_| {
            let start = rng.gen_range(0..=stream.len() - len);
            stream[start..start + len].to_vec()
        })
        .collect())
}

struct Batch {
    tokens: Vec<Vec<TokenId>>,
    targets: Vec<Option<usize>>,
}

fn lm_batch(stream: &[TokenId], batch: usize, len: usize, rng: &mut rng::Rng) -> Batch {
    let mut tokens = Vec::with_capacity(batch);
    let mut targets = Vec::with_capacity(batch * len);
    for _ in 0..batch {
        let start = rng.gen_range(0..stream.len() - len);
        let w = &stream[start..=start + len];
        tokens.push(w[..len].to_vec());
        targets.extend(w[1..].iter().map(|&t| Some(t)));
    }
    Batch { tokens, targets }
}

fn supervised_batch(examples: &[Example], batch: usize, rng: &mut rng::Rng) -> Batch {
    let picks: Vec<&Example> = (0..batch).map(|_| &examples[rng.gen_range(0..examples.len())]).collect();
    let len = picks.iter().map(|e| e.tokens.len() - 1).max().unwrap_or(1);
    let mut tokens = Vec::with_capacity(batch);
    let mut targets = vec![None; batch * len];
    for (b, e) in picks.iter().enumerate() {
        let mut row = e.tokens[..e.tokens.len() - 1].to_vec();
        row.resize(len, PAD);
        tokens.push(row);
        for p in e.target_start - 1..e.tokens.len() - 1 {
            targets[b * len + p] = Some(e.tokens[p + 1]);
        }
    }
    Batch { tokens, targets }
}

/// Trains a fresh model on the corpus and the task training splits.
pub fn train_teacher(
    init: &TransformerModel,
    data: &DeskData,
    vocab: &Vocab,
    cfg: &TeacherConfig,
    seed: u64,
) -> Result<(TransformerModel, Vec<TrainLogEntry>)> {
    cfg.validate()?;
    let max_len = init.config().max_seq_len;
    if cfg.seq_len > max_len {
        return Err(Error::config(format!(
            "seq_len {} exceeds max_seq_len {max_len}",
            cfg.seq_len
        )));
    }
    let stream = corpus_stream(&data.corpus, vocab)?;
    if stream.len() <= cfg.seq_len {
        return Err(Error::config("corpus is shorter than one training window"));
    }
    let items: Vec<TaskItem> = data.tasks.iter().flat_map(|t| t.train.iter().cloned()).collect();
    let examples = supervised_examples(&items, vocab, max_len + 1)?;
    if examples.is_empty() && cfg.supervised_fraction > 0.0 {
        return Err(Error::config("supervised batches requested but no training items exist"));
    }

    let mut model = init.clone();
    model.zero_grad();
    let mask = vec![true; model.params().len()];
    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let mut rng = rng::stream(seed, "teacher/batches");
    let mut log = Vec::new();
    let mut running = 0.0;
    let mut seen = 0;
    for step in 0..cfg.steps {
        let batch = if rng.gen_bool(cfg.supervised_fraction) {
            supervised_batch(&examples, cfg.batch_size, &mut rng)
        } else {
            lm_batch(&stream, cfg.batch_size, cfg.seq_len, &mut rng)
        };
        let tape = Tape::new();
        let graph = model.forward_graph(&tape, &batch.tokens, Some(&mask))?;
        let loss = tape.cross_entropy(graph.logits, &batch.targets)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Compute(format!("non-finite teacher loss at step {step}")));
        }
        let grads = tape.backward(loss)?;
        let collected: Vec<Vec<f64>> = graph
            .params
            .iter()
            .zip(model.params())
            .map(|(&v, p)| grads.get(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
            .collect();
        let norm = collected.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        let factor = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            cfg.clip_norm / norm
        } else {
            1.0
        };
        for (p, mut g) in model.params_mut().into_iter().zip(collected) {
            g.iter_mut().for_each(|x| *x *= factor);
            p.accumulate_grad(&g)?;
        }
        let lr = cfg.learning_rate_at(step);
        adam.set_learning_rate(lr);
        adam.step(&mut model.params_mut(), &mask)?;
        model.zero_grad();

        running += value;
        seen += 1;
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            log.push(TrainLogEntry {
                step,
                loss: running / seen as f64,
                learning_rate: lr,
            });
            running = 0.0;
            seen = 0;
        }
    }
    Ok((model, log))
}
