//! Distillation losses and the fine-tuning loop.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{trainable_blocks, trainable_mask, ForwardTrace, GraphTrace, TrainablePolicy, TransformerModel};
use crate::rng;
use crate::tensor::{kernels, AdamConfig, AdamState, KlDirection, KlInput, Tape, Var};
use crate::vocab::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetForm {
    Logits,
    LogProbs,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdTerm {
    pub direction: KlDirection,
    pub target_form: TargetForm,
    pub scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MsePlacement {
    AllLayers,
    LastLayers,
    LastTrainable,
    LastTrainablePlusLast,
    AllTrainable,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MseTerm {
    pub placement: MsePlacement,
    pub scale: f64,
}

/// A KL term on the output distribution, an MSE term on hidden states, or both.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    #[serde(default)]
    pub kd_term: Option<KdTerm>,
    #[serde(default)]
    pub mse_term: Option<MseTerm>,
}

impl Default for LossSpec {
    /// Forward KL on logits scaled by 1/100 plus MSE on the last trainable
    /// and last block outputs.
    fn default() -> Self {
        LossSpec {
            kd_term: Some(KdTerm {
                direction: KlDirection::Forward,
                target_form: TargetForm::Logits,
                scale: 0.01,
            }),
            mse_term: Some(MseTerm {
                placement: MsePlacement::LastTrainablePlusLast,
                scale: 1.0,
            }),
        }
    }
}

fn check_scale(scale: f64, what: &str) -> Result<()> {
    if scale > 0.0 && scale.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("{what} scale must be positive and finite, got {scale}")))
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kd_term.is_none() && self.mse_term.is_none() {
            return Err(Error::config("a loss needs a KL term, an MSE term or both"));
        }
        if let Some(kd) = &self.kd_term {
            check_scale(kd.scale, "KL")?;
        }
        if let Some(mse) = &self.mse_term {
            check_scale(mse.scale, "MSE")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default)]
    pub loss: LossSpec,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_seq")]
    pub max_seq_len: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub trainable_policy: TrainablePolicy,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_lr() -> f64 {
    1e-4
}
fn default_seq() -> usize {
    128
}
fn default_steps() -> usize {
    200
}
fn default_batch() -> usize {
    8
}
fn default_temperature() -> f64 {
    1.0
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            loss: LossSpec::default(),
            learning_rate: default_lr(),
            max_seq_len: default_seq(),
            steps: default_steps(),
            batch_size: default_batch(),
            trainable_policy: TrainablePolicy::default(),
            temperature: default_temperature(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.steps == 0 || self.batch_size == 0 || self.max_seq_len == 0 {
            return Err(Error::config("steps, batch_size and max_seq_len must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate {} is not positive", self.learning_rate)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!("temperature {} is not positive", self.temperature)));
        }
        Ok(())
    }
}

/// Student block `j` is compared with teacher block `provenance[j]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerAlignment {
    pub pairs: Vec<(usize, usize)>,
}

pub fn align_layers(student: &TransformerModel, teacher: &TransformerModel) -> Result<LayerAlignment> {
    let t = teacher.n_layers();
    if student.source_depth() != t || student.provenance().iter().any(|&p| p >= t) {
        return Err(Error::contract(format!(
            "student provenance {:?} does not index a {t}-layer teacher",
            student.provenance()
        )));
    }
    Ok(LayerAlignment {
        pairs: student.provenance().iter().copied().enumerate().collect(),
    })
}

/// KL term on `[rows, vocab]` inputs. Logits are normalised with a
/// temperature-scaled log-softmax; log-probabilities are used as given.
pub fn kd_loss(tape: &Tape, term: &KdTerm, student: Var, teacher: &[f64], temperature: f64) -> Result<Var> {
    let input = match term.target_form {
        TargetForm::Logits => KlInput::Logits { temperature },
        TargetForm::LogProbs => KlInput::LogProbs,
    };
    let shape = tape.shape(student);
    if shape.len() != 2 || teacher.len() != shape.iter().product::<usize>() {
        return Err(Error::contract(format!(
            "student shape {shape:?} and {} teacher values disagree",
            teacher.len()
        )));
    }
    let kl = tape.kl_divergence(student, teacher, term.direction, input)?;
    Ok(tape.scale(kl, term.scale))
}

/// Selected `(student block, teacher block)` pairs for a placement.
pub fn mse_pairs(
    placement: MsePlacement,
    alignment: &LayerAlignment,
    teacher_layers: usize,
    trainable_layers: &[usize],
) -> Result<Vec<(usize, usize)>> {
    let pair_of = |j: usize| {
        alignment
            .pairs
            .iter()
            .find(|p| p.0 == j)
            .copied()
            .ok_or_else(|| Error::contract(format!("student block {j} has no alignment pair")))
    };
    let last = || -> Result<(usize, usize)> {
        let s = alignment
            .pairs
            .iter()
            .map(|p| p.0)
            .max()
            .ok_or_else(|| Error::config("alignment is empty"))?;
        Ok((s, teacher_layers - 1))
    };
    let last_trainable = || -> Result<(usize, usize)> {
        let j = trainable_layers
            .iter()
            .max()
            .ok_or_else(|| Error::config("MSE placement needs at least one trainable block"))?;
        pair_of(*j)
    };
    let pairs = match placement {
        MsePlacement::AllLayers => alignment.pairs.clone(),
        MsePlacement::LastLayers => vec![last()?],
        MsePlacement::LastTrainable => vec![last_trainable()?],
        MsePlacement::LastTrainablePlusLast => vec![last_trainable()?, last()?],
        MsePlacement::AllTrainable => trainable_layers.iter().map(|&j| pair_of(j)).collect::<Result<_>>()?,
    };
    if pairs.is_empty() {
        return Err(Error::config(format!("MSE placement {placement:?} selects no layer pairs")));
    }
    Ok(pairs)
}

/// MSE between block outputs. `student_hidden[j + 1]` is the output of
/// student block `j`; `teacher_hidden[p + 1]` that of teacher block `p`.
pub fn mse_hidden_loss(
    tape: &Tape,
    term: &MseTerm,
    student_hidden: &[Var],
    teacher_hidden: &[&[f64]],
    alignment: &LayerAlignment,
    trainable_layers: &[usize],
) -> Result<Var> {
    if teacher_hidden.len() < 2 {
        return Err(Error::contract("teacher trace carries no hidden states"));
    }
    let pairs = mse_pairs(term.placement, alignment, teacher_hidden.len() - 1, trainable_layers)?;
    let mut total: Option<Var> = None;
    for (s, t) in pairs {
        let sv = *student_hidden
            .get(s + 1)
            .ok_or_else(|| Error::contract(format!("student trace lacks block {s}")))?;
        let target = teacher_hidden
            .get(t + 1)
            .ok_or_else(|| Error::contract(format!("teacher trace lacks block {t}")))?;
        let shape = tape.shape(sv);
        if shape.iter().product::<usize>() != target.len() {
            return Err(Error::contract(format!(
                "hidden widths differ: student {shape:?}, teacher {} values",
                target.len()
            )));
        }
        let tv = tape.constant(shape, target.to_vec())?;
        let diff = tape.sub(sv, tv)?;
        let mse = tape.mean_all(tape.mul(diff, diff)?);
        total = Some(match total {
            Some(acc) => tape.add(acc, mse)?,
            None => mse,
        });
    }
    Ok(tape.scale(total.expect("at least one pair"), term.scale))
}

/// Loss graph plus the value of each term.
pub struct LossParts {
    pub total: Var,
    pub kd: Option<f64>,
    pub mse: Option<f64>,
}

/// Row-wise log-softmax of detached values.
pub fn log_probs(values: &[f64], vocab: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for (src, dst) in values.chunks_exact(vocab).zip(out.chunks_exact_mut(vocab)) {
        kernels::log_softmax_row(src, dst);
    }
    out
}

/// Sum of the terms present in `spec`. For log-probability targets both
/// sides are converted with a plain log-softmax before the KL term.
pub fn combined_loss(
    tape: &Tape,
    spec: &LossSpec,
    student: &GraphTrace,
    teacher: &ForwardTrace,
    alignment: &LayerAlignment,
    trainable_layers: &[usize],
    temperature: f64,
) -> Result<LossParts> {
    spec.validate()?;
    let mut total = None;
    let mut kd = None;
    let mut mse = None;
    if let Some(term) = &spec.kd_term {
        let v = tape.shape(student.logits)[1];
        let loss = match term.target_form {
            TargetForm::Logits => kd_loss(tape, term, student.logits, teacher.logits.data(), temperature)?,
            TargetForm::LogProbs => {
                let s = tape.log_softmax(student.logits, 1)?;
                kd_loss(tape, term, s, &log_probs(teacher.logits.data(), v), temperature)?
            }
        };
        kd = Some(tape.scalar(loss));
        total = Some(loss);
    }
    if let Some(term) = &spec.mse_term {
        let hidden: Vec<&[f64]> = teacher.hidden_states.iter().map(|h| h.data()).collect();
        let loss = mse_hidden_loss(tape, term, &student.hidden, &hidden, alignment, trainable_layers)?;
        mse = Some(tape.scalar(loss));
        total = Some(match total {
            Some(acc) => tape.add(acc, loss)?,
            None => loss,
        });
    }
    Ok(LossParts {
        total: total.expect("validated spec has a term"),
        kd,
        mse,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
}

pub fn write_log(path: &Path, log: &[LogEntry]) -> Result<()> {
    let mut body = Vec::new();
    for e in log {
        serde_json::to_writer(&mut body, e)?;
        body.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&body).map_err(|e| Error::io(path, e))
}

/// Copies tape gradients into the masked parameters; unreachable ones get zeros.
pub(crate) fn load_gradients(
    model: &mut TransformerModel,
    tape_grads: &crate::tensor::Gradients,
    vars: &[Var],
    mask: &[bool],
) -> Result<()> {
    for ((p, &v), &on) in model.params_mut().into_iter().zip(vars).zip(mask) {
        if !on {
            continue;
        }
        match tape_grads.get(v) {
            Some(g) => p.accumulate_grad(g)?,
            None => {
                let zeros = vec![0.0; p.numel()];
                p.accumulate_grad(&zeros)?;
            }
        }
    }
    Ok(())
}

/// Samples `batch` sequences and cuts them to a common length.
pub(crate) fn sample_batch(corpus: &[Vec<TokenId>], batch: usize, max_len: usize, rng: &mut rng::Rng) -> Vec<Vec<TokenId>> {
    let picks: Vec<&Vec<TokenId>> = (0..batch).map(|_| &corpus[rng.gen_range(0..corpus.len())]).collect();
    let len = picks.iter().map(|s| s.len()).min().unwrap_or(0).min(max_len);
    picks.iter().map(|s| s[..len].to_vec()).collect()
}

/// Trains `student` against the frozen `teacher` for `cfg.steps` batches.
pub fn finetune(
    student: &TransformerModel,
    teacher: &TransformerModel,
    corpus: &[Vec<TokenId>],
    cfg: &DistillConfig,
    seed: u64,
) -> Result<(TransformerModel, Vec<LogEntry>)> {
    cfg.validate()?;
    if corpus.len() < cfg.batch_size {
        return Err(Error::config(format!(
            "corpus of {} sequences is shorter than one batch of {}",
            corpus.len(),
            cfg.batch_size
        )));
    }
    if corpus.iter().any(Vec::is_empty) {
        return Err(Error::config("corpus contains an empty sequence"));
    }
    let alignment = align_layers(student, teacher)?;
    let trainable = trainable_blocks(student, cfg.trainable_policy);
    let mask = trainable_mask(student, cfg.trainable_policy);
    let max_len = cfg
        .max_seq_len
        .min(student.config().max_seq_len)
        .min(teacher.config().max_seq_len);
    let mut model = student.clone();
    model.zero_grad();
    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let mut rng = rng::stream(seed, "finetune");
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sample_batch(corpus, cfg.batch_size, max_len, &mut rng);
        let target = teacher.forward(&batch, true)?;
        let tape = Tape::new();
        let graph = model.forward_graph(&tape, &batch, Some(&mask))?;
        let parts = combined_loss(
            &tape,
            &cfg.loss,
            &graph,
            &target,
            &alignment,
            &trainable,
            cfg.temperature,
        )?;
        let loss = tape.scalar(parts.total);
        if !loss.is_finite() {
            return Err(Error::Compute(format!("non-finite fine-tuning loss at step {step}")));
        }
        if tape.requires_grad(parts.total) {
            let grads = tape.backward(parts.total)?;
            load_gradients(&mut model, &grads, &graph.params, &mask)?;
            adam.step(&mut model.params_mut(), &mask)?;
            model.zero_grad();
        }
        log.push(LogEntry {
            step,
            loss,
            kd: parts.kd,
            mse: parts.mse,
        });
    }
    Ok((model, log))
}
