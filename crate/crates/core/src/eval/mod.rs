//! Task suite, Aggregate Score and layer-importance probing.

pub mod desk;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, ChoiceItem, CopyItem, LanguageModel};
use crate::model::TransformerModel;
use crate::par;
use crate::rng;
use crate::vocab::{TokenId, Vocab};

pub use desk::{build_desk_suite, SuiteSizes};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MultipleChoice,
    CopyDoc,
    CopyPara,
    Transduce,
    Summarize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    ExactCopy,
    TokenF1,
    Rouge1,
}

impl Metric {
    pub fn default_for(kind: TaskKind) -> Metric {
        match kind {
            TaskKind::MultipleChoice => Metric::Accuracy,
            TaskKind::CopyDoc | TaskKind::CopyPara => Metric::ExactCopy,
            TaskKind::Transduce => Metric::TokenF1,
            TaskKind::Summarize => Metric::Rouge1,
        }
    }

    /// Declared kind/metric compatibility table.
    pub fn compatible(self, kind: TaskKind) -> bool {
        matches!(
            (kind, self),
            (TaskKind::MultipleChoice, Metric::Accuracy)
                | (TaskKind::CopyDoc | TaskKind::CopyPara, Metric::ExactCopy)
                | (TaskKind::Transduce | TaskKind::Summarize, Metric::TokenF1 | Metric::Rouge1)
        )
    }
}

/// One dataset item in text form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TaskItem {
    Choice { prompt: String, options: Vec<String>, answer: usize },
    Copy { prompt: String, source: String },
    Generate { prompt: String, reference: String },
}

impl TaskItem {
    pub fn prompt(&self) -> &str {
        match self {
            TaskItem::Choice { prompt, .. } | TaskItem::Copy { prompt, .. } | TaskItem::Generate { prompt, .. } => {
                prompt
            }
        }
    }

    /// The text a model should produce after the prompt.
    pub fn target(&self) -> &str {
        match self {
            TaskItem::Choice { options, answer, .. } => &options[*answer],
            TaskItem::Copy { source, .. } => source,
            TaskItem::Generate { reference, .. } => reference,
        }
    }

    /// Prompt, target and the closing newline.
    pub fn training_text(&self) -> String {
        format!("{}{}\n", self.prompt(), self.target())
    }

    fn fits(&self, kind: TaskKind) -> bool {
        matches!(
            (self, kind),
            (TaskItem::Choice { .. }, TaskKind::MultipleChoice)
                | (TaskItem::Copy { .. }, TaskKind::CopyDoc | TaskKind::CopyPara)
                | (TaskItem::Generate { .. }, TaskKind::Transduce | TaskKind::Summarize)
        )
    }
}

enum Encoded {
    Choice(ChoiceItem),
    Copy(CopyItem),
    Generate { prompt: Vec<TokenId>, reference: Vec<String>, max_new: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EvalMode {
    Full,
    Probe,
}

/// A named task with its evaluation items and probe subset.
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub metric: Metric,
    pub items: Vec<TaskItem>,
    pub probe_subset_size: usize,
    probe_indices: Vec<usize>,
    encoded: Vec<Encoded>,
    vocab: Vocab,
}

impl TaskSpec {
    /// The probe subset is a seeded sample of item indices kept in item
    /// order, so a full-size probe visits exactly the Full-mode items.
    pub fn new(
        name: &str,
        kind: TaskKind,
        metric: Metric,
        items: Vec<TaskItem>,
        probe_subset_size: usize,
        seed: u64,
        vocab: &Vocab,
    ) -> Result<Self> {
        if !metric.compatible(kind) {
            return Err(Error::config(format!("metric {metric:?} cannot score {kind:?} task {name}")));
        }
        if items.is_empty() {
            return Err(Error::config(format!("task {name} has no items")));
        }
        if probe_subset_size == 0 || probe_subset_size > items.len() {
            return Err(Error::config(format!(
                "probe subset of {probe_subset_size} for {} items in task {name}",
                items.len()
            )));
        }
        if let Some(bad) = items.iter().find(|i| !i.fits(kind)) {
            return Err(Error::config(format!("task {name} ({kind:?}) holds a mismatched item: {bad:?}")));
        }
        let encoded = items.iter().map(|i| encode(i, vocab)).collect::<Result<_>>()?;
        let mut r = rng::stream(seed, &format!("probe/{name}"));
        let mut probe_indices = rand::seq::index::sample(&mut r, items.len(), probe_subset_size).into_vec();
        probe_indices.sort_unstable();
        Ok(TaskSpec {
            name: name.to_string(),
            kind,
            metric,
            items,
            probe_subset_size,
            probe_indices,
            encoded,
            vocab: vocab.clone(),
        })
    }

    pub fn probe_indices(&self) -> &[usize] {
        &self.probe_indices
    }

    fn selected(&self, mode: EvalMode) -> Vec<&Encoded> {
        match mode {
            EvalMode::Full => self.encoded.iter().collect(),
            EvalMode::Probe => self.probe_indices.iter().map(|&i| &self.encoded[i]).collect(),
        }
    }

    /// Score of `model` on this task, in `[0, 1]`.
    pub fn score<M: LanguageModel + ?Sized>(&self, model: &M, mode: EvalMode) -> Result<f64> {
        let items = self.selected(mode);
        let stop = Some(self.vocab.newline());
        match self.metric {
            Metric::Accuracy => {
                let choice: Vec<ChoiceItem> = items
                    .iter()
                    .filter_map(|e| match e {
                        Encoded::Choice(c) => Some(c.clone()),
                        _ => None,
                    })
                    .collect();
                metrics::choice_accuracy(model, &choice)
            }
            Metric::ExactCopy => {
                let copy: Vec<CopyItem> = items
                    .iter()
                    .filter_map(|e| match e {
                        Encoded::Copy(c) => Some(c.clone()),
                        _ => None,
                    })
                    .collect();
                metrics::exact_copy_score(model, &copy, stop)
            }
            Metric::TokenF1 | Metric::Rouge1 => {
                let scores = par::map(&items, |e| match e {
                    Encoded::Generate {
                        prompt,
                        reference,
                        max_new,
                    } => {
                        let out = model.greedy_continuation(prompt, *max_new, stop)?;
                        let text = self.vocab.decode(&out);
                        let words: Vec<&str> = text.split_whitespace().collect();
                        let reference: Vec<&str> = reference.iter().map(String::as_str).collect();
                        if self.metric == Metric::TokenF1 {
                            metrics::token_f1(&words, &reference)
                        } else {
                            metrics::rouge1(&words, &reference)
                        }
                    }
                    _ => Err(Error::contract("generative metric on a non-generative item")),
                });
                let mut total = 0.0;
                for s in scores {
                    total += s?;
                }
                Ok(total / items.len() as f64)
            }
        }
    }
}

fn encode(item: &TaskItem, vocab: &Vocab) -> Result<Encoded> {
    Ok(match item {
        TaskItem::Choice { prompt, options, answer } => {
            if *answer >= options.len() {
                return Err(Error::config(format!("answer {answer} out of range for {} options", options.len())));
            }
            Encoded::Choice(ChoiceItem {
                prompt: vocab.encode(prompt)?,
                options: options.iter().map(|o| vocab.encode(o)).collect::<Result<_>>()?,
                answer: *answer,
            })
        }
        TaskItem::Copy { prompt, source } => Encoded::Copy(CopyItem {
            prompt: vocab.encode(prompt)?,
            source: vocab.encode(source)?,
        }),
        TaskItem::Generate { prompt, reference } => {
            let words: Vec<String> = reference.split_whitespace().map(str::to_string).collect();
            if words.is_empty() {
                return Err(Error::config("generative item with an empty reference"));
            }
            Encoded::Generate {
                prompt: vocab.encode(prompt)?,
                reference: words,
                max_new: reference.chars().count() + 8,
            }
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task: BTreeMap<String, f64>,
    pub aggregate: f64,
    pub model_fingerprint: String,
    pub item_count_mode: EvalMode,
}

/// Aggregate Score: the plain mean of per-task scores.
pub fn aggregate(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::contract("aggregate of zero tasks"));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

impl EvalReport {
    pub fn from_scores(per_task: BTreeMap<String, f64>, model_fingerprint: String, mode: EvalMode) -> Result<Self> {
        let scores: Vec<f64> = per_task.values().copied().collect();
        Ok(EvalReport {
            aggregate: aggregate(&scores)?,
            per_task,
            model_fingerprint,
            item_count_mode: mode,
        })
    }
}

fn check_suite(suite: &[TaskSpec]) -> Result<()> {
    if suite.is_empty() {
        return Err(Error::config("evaluation suite is empty"));
    }
    for t in suite {
        if !t.metric.compatible(t.kind) {
            return Err(Error::config(format!("metric {:?} cannot score {:?} task {}", t.metric, t.kind, t.name)));
        }
    }
    let mut names: Vec<&str> = suite.iter().map(|t| t.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::config("duplicate task names in suite"));
    }
    Ok(())
}

/// Scores any [`LanguageModel`]; `fingerprint` identifies it in the report.
pub fn evaluate_with<M: LanguageModel + ?Sized>(
    model: &M,
    fingerprint: String,
    suite: &[TaskSpec],
    mode: EvalMode,
) -> Result<EvalReport> {
    check_suite(suite)?;
    let mut per_task = BTreeMap::new();
    for t in suite {
        per_task.insert(t.name.clone(), t.score(model, mode)?);
    }
    EvalReport::from_scores(per_task, fingerprint, mode)
}

pub fn evaluate(model: &TransformerModel, suite: &[TaskSpec], mode: EvalMode) -> Result<EvalReport> {
    evaluate_with(model, model.fingerprint(), suite, mode)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImportanceMethod {
    #[serde(rename = "BI")]
    Bi,
    EvalDrop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    /// Current block index.
    pub layer: usize,
    /// Index in the original teacher.
    pub original_layer: usize,
    pub importance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_task: Option<BTreeMap<String, f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerImportanceReport {
    pub method: ImportanceMethod,
    /// Scored layers in ascending index order; protected layers are absent
    /// for evaluation drops and present but ineligible for BI.
    pub per_layer: Vec<LayerScore>,
    /// Current index of the least important eligible layer.
    pub least_important: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub protected: Vec<usize>,
    /// Probe-mode aggregate of the unmodified model (evaluation drops only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_aggregate: Option<f64>,
}

impl LayerImportanceReport {
    pub fn least_important_original(&self) -> usize {
        self.per_layer
            .iter()
            .find(|s| s.layer == self.least_important)
            .map(|s| s.original_layer)
            .expect("least important layer is scored")
    }

    /// Eligible layers ordered by ascending importance, ties by index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut eligible: Vec<&LayerScore> = self
            .per_layer
            .iter()
            .filter(|s| !self.protected.contains(&s.layer))
            .collect();
        eligible.sort_by(|a, b| a.importance.total_cmp(&b.importance).then(a.layer.cmp(&b.layer)));
        eligible.iter().map(|s| s.layer).collect()
    }
}

/// Lowest score among eligible layers; the first one wins ties.
pub fn least_important_of(scores: &[LayerScore], protected: &[usize]) -> Result<usize> {
    scores
        .iter()
        .filter(|s| !protected.contains(&s.layer))
        .fold(None::<&LayerScore>, |best, s| match best {
            Some(b) if b.importance <= s.importance => Some(b),
            _ => Some(s),
        })
        .map(|s| s.layer)
        .ok_or_else(|| Error::config("every layer is protected"))
}

fn check_protected(model: &TransformerModel, protected: &[usize]) -> Result<()> {
    if let Some(&bad) = protected.iter().find(|&&p| p >= model.n_layers()) {
        return Err(Error::config(format!(
            "protected layer {bad} out of range for {} layers",
            model.n_layers()
        )));
    }
    if (0..model.n_layers()).all(|l| protected.contains(&l)) {
        return Err(Error::config("every layer is protected"));
    }
    Ok(())
}

/// Removes each unprotected layer in turn and records the Probe-mode
/// aggregate drop. Candidates are scored concurrently; results are
/// collected by layer index.
pub fn importance_by_evaluation(
    model: &TransformerModel,
    suite: &[TaskSpec],
    protected: &[usize],
) -> Result<LayerImportanceReport> {
    if model.n_layers() < 2 {
        return Err(Error::contract("evaluation importance needs at least two layers"));
    }
    check_protected(model, protected)?;
    check_suite(suite)?;
    let base = evaluate_with(model, String::new(), suite, EvalMode::Probe)?;
    let candidates: Vec<usize> = (0..model.n_layers()).filter(|l| !protected.contains(l)).collect();
    let results = par::map(&candidates, |&layer| -> Result<LayerScore> {
        let variant = model.remove_layer(layer)?;
        let report = evaluate_with(&variant, String::new(), suite, EvalMode::Probe)?;
        let per_task = base
            .per_task
            .iter()
            .map(|(k, v)| (k.clone(), v - report.per_task[k]))
            .collect();
        Ok(LayerScore {
            layer,
            original_layer: model.provenance()[layer],
            importance: base.aggregate - report.aggregate,
            per_task: Some(per_task),
        })
    });
    let per_layer = results.into_iter().collect::<Result<Vec<_>>>()?;
    let least_important = least_important_of(&per_layer, &[])?;
    Ok(LayerImportanceReport {
        method: ImportanceMethod::EvalDrop,
        per_layer,
        least_important,
        protected: protected.to_vec(),
        baseline_aggregate: Some(base.aggregate),
    })
}

/// Block Influence as importance.
pub fn importance_by_bi(
    model: &TransformerModel,
    calibration: &[Vec<TokenId>],
    protected: &[usize],
) -> Result<LayerImportanceReport> {
    check_protected(model, protected)?;
    let bi = metrics::block_influence(model, calibration)?;
    let per_layer: Vec<LayerScore> = bi
        .per_layer_bi
        .iter()
        .enumerate()
        .map(|(layer, &importance)| LayerScore {
            layer,
            original_layer: model.provenance()[layer],
            importance,
            per_task: None,
        })
        .collect();
    let least_important = least_important_of(&per_layer, protected)?;
    Ok(LayerImportanceReport {
        method: ImportanceMethod::Bi,
        per_layer,
        least_important,
        protected: protected.to_vec(),
        baseline_aggregate: None,
    })
}
