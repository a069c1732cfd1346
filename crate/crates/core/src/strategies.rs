//! The five pruning campaigns and their run records.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::{finetune, DistillConfig, LogEntry};
use crate::error::{Error, Result};
use crate::eval::{evaluate, importance_by_bi, importance_by_evaluation, EvalMode, EvalReport, LayerImportanceReport, TaskSpec};
use crate::model::{save_model, TransformerModel};
use crate::rng;
use crate::vocab::TokenId;

pub const RUN_FILE: &str = "run.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    ShortGPT,
    IterativeBI,
    IterativeBIPlusFT,
    IterativeLayerwisePruning,
    IterativeLayerwiseDistillation,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::ShortGPT,
        StrategyKind::IterativeBI,
        StrategyKind::IterativeBIPlusFT,
        StrategyKind::IterativeLayerwisePruning,
        StrategyKind::IterativeLayerwiseDistillation,
    ];

    pub fn fine_tunes(self) -> bool {
        matches!(
            self,
            StrategyKind::IterativeBIPlusFT | StrategyKind::IterativeLayerwiseDistillation
        )
    }

    pub fn uses_evaluation(self) -> bool {
        matches!(
            self,
            StrategyKind::IterativeLayerwisePruning | StrategyKind::IterativeLayerwiseDistillation
        )
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneStep {
    pub layers_remaining: usize,
    /// Original-teacher index of the block removed at this step.
    pub removed_layer: usize,
    pub importance: LayerImportanceReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune_log: Option<Vec<LogEntry>>,
    pub eval: EvalReport,
    /// Checkpoint file name inside the run directory, when persisted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Failed { message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneRun {
    pub strategy: StrategyKind,
    pub k: usize,
    pub seed: u64,
    pub teacher_fingerprint: String,
    pub teacher_layers: usize,
    /// Original-teacher indices that may not be removed.
    #[serde(default)]
    pub protected: Vec<usize>,
    /// Loss and schedule used by fine-tuning strategies.
    pub distill: DistillConfig,
    /// Full-mode report of the unpruned teacher.
    pub baseline: EvalReport,
    pub removal_order: Vec<usize>,
    pub per_step: Vec<PruneStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_model_path: Option<String>,
    pub status: RunStatus,
}

impl PruneRun {
    pub fn final_eval(&self) -> Option<&EvalReport> {
        self.per_step.last().map(|s| &s.eval)
    }

    pub fn final_aggregate(&self) -> Option<f64> {
        self.final_eval().map(|e| e.aggregate)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RUN_FILE);
        let body = serde_json::to_vec_pretty(self)?;
        fs::write(&path, body).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_FILE);
        let body = fs::read(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Missing(path.clone())
            } else {
                Error::io(&path, e)
            }
        })?;
        Ok(serde_json::from_slice(&body)?)
    }
}

/// Everything a campaign reads besides its kind and seed.
#[derive(Clone, Copy)]
pub struct StrategyInputs<'a> {
    pub teacher: &'a TransformerModel,
    pub suite: &'a [TaskSpec],
    /// Token sequences used for fine-tuning.
    pub corpus: &'a [Vec<TokenId>],
    /// Sequences used for Block Influence.
    pub calibration: &'a [Vec<TokenId>],
    pub distill: &'a DistillConfig,
    /// Original-teacher indices that may not be removed.
    pub protected: &'a [usize],
}

fn current_protected(model: &TransformerModel, protected: &[usize]) -> Vec<usize> {
    model
        .provenance()
        .iter()
        .enumerate()
        .filter(|(_, p)| protected.contains(p))
        .map(|(i, _)| i)
        .collect()
}

fn checkpoint_name(step: usize) -> String {
    format!("step_{:02}.dlm", step + 1)
}

struct Recorder<'a> {
    run: PruneRun,
    dir: Option<&'a Path>,
}

impl Recorder<'_> {
    fn push(
        &mut self,
        model: &TransformerModel,
        removed_layer: usize,
        importance: LayerImportanceReport,
        finetune_log: Option<Vec<LogEntry>>,
        suite: &[TaskSpec],
    ) -> Result<()> {
        let eval = evaluate(model, suite, EvalMode::Full)?;
        let step = self.run.per_step.len();
        let checkpoint = match self.dir {
            Some(dir) => {
                let name = checkpoint_name(step);
                save_model(model, &dir.join(&name))?;
                Some(name)
            }
            None => None,
        };
        self.run.removal_order.push(removed_layer);
        self.run.per_step.push(PruneStep {
            layers_remaining: model.n_layers(),
            removed_layer,
            importance,
            finetune_log,
            eval,
            checkpoint,
        });
        Ok(())
    }
}

/// Runs one pruning campaign that removes `k` blocks from `inputs.teacher`.
///
/// With `run_dir` set, every step's checkpoint and the run record are written
/// there; a failing run still leaves its partial record behind.
pub fn run_strategy(
    kind: StrategyKind,
    k: usize,
    inputs: StrategyInputs<'_>,
    seed: u64,
    run_dir: Option<&Path>,
) -> Result<PruneRun> {
    let teacher = inputs.teacher;
    let n = teacher.n_layers();
    if k == 0 || k >= n {
        return Err(Error::config(format!("k must satisfy 0 < k < {n}, got {k}")));
    }
    if let Some(&bad) = inputs.protected.iter().find(|&&p| p >= n) {
        return Err(Error::config(format!("protected layer {bad} out of range for {n} layers")));
    }
    if n - inputs.protected.len() < k {
        return Err(Error::config(format!(
            "cannot remove {k} layers with {} of {n} protected",
            inputs.protected.len()
        )));
    }
    if kind.fine_tunes() {
        inputs.distill.validate()?;
    }
    let baseline = evaluate(teacher, inputs.suite, EvalMode::Full)?;
    let mut rec = Recorder {
        run: PruneRun {
            strategy: kind,
            k,
            seed,
            teacher_fingerprint: teacher.fingerprint(),
            teacher_layers: n,
            protected: inputs.protected.to_vec(),
            distill: inputs.distill.clone(),
            baseline,
            removal_order: Vec::with_capacity(k),
            per_step: Vec::with_capacity(k),
            final_model_path: None,
            status: RunStatus::Complete,
        },
        dir: run_dir,
    };
    let outcome = match kind {
        StrategyKind::ShortGPT => one_shot(&mut rec, k, inputs),
        _ => iterative(&mut rec, kind, k, inputs, seed),
    };
    match outcome {
        Ok(()) => {
            rec.run.final_model_path = rec.run.per_step.last().and_then(|s| s.checkpoint.clone());
            if let Some(dir) = run_dir {
                rec.run.save(dir)?;
            }
            Ok(rec.run)
        }
        Err(e) => {
            if let Some(dir) = run_dir {
                rec.run.status = RunStatus::Failed { message: e.to_string() };
                // The original error is the one worth reporting.
                let _ = rec.run.save(dir);
            }
            Err(e)
        }
    }
}

fn one_shot(rec: &mut Recorder<'_>, k: usize, inputs: StrategyInputs<'_>) -> Result<()> {
    let teacher = inputs.teacher;
    let protected = current_protected(teacher, inputs.protected);
    let report = importance_by_bi(teacher, inputs.calibration, &protected)?;
    let chosen: Vec<usize> = report.ranking().into_iter().take(k).collect();
    let pruned = teacher.remove_layers(&chosen)?;
    for step in 0..k {
        // Intermediate snapshots exist only for reporting; the final model is one surgery pass.
        let model = if step + 1 == k {
            pruned.clone()
        } else {
            teacher.remove_layers(&chosen[..=step])?
        };
        let removed = teacher.provenance()[chosen[step]];
        rec.push(&model, removed, report.clone(), None, inputs.suite)?;
    }
    Ok(())
}

fn iterative(
    rec: &mut Recorder<'_>,
    kind: StrategyKind,
    k: usize,
    inputs: StrategyInputs<'_>,
    seed: u64,
) -> Result<()> {
    let mut model = inputs.teacher.clone();
    for step in 0..k {
        let protected = current_protected(&model, inputs.protected);
        let report = if kind.uses_evaluation() {
            importance_by_evaluation(&model, inputs.suite, &protected)?
        } else {
            importance_by_bi(&model, inputs.calibration, &protected)?
        };
        let removed = report.least_important_original();
        let mut next = model.remove_layer(report.least_important)?;
        let log = if kind.fine_tunes() {
            let ft_seed = rng::child_seed(seed, &format!("finetune/{step}"));
            let (tuned, log) = finetune(&next, inputs.teacher, inputs.corpus, inputs.distill, ft_seed)?;
            next = tuned;
            Some(log)
        } else {
            None
        };
        model = next;
        rec.push(&model, removed, report, log, inputs.suite)?;
    }
    Ok(())
}

/// Removal counts per original layer, grouped by strategy.
pub fn removed_layer_statistics(runs: &[PruneRun]) -> Result<BTreeMap<StrategyKind, BTreeMap<usize, usize>>> {
    if runs.is_empty() {
        return Err(Error::contract("removed-layer statistics need at least one run"));
    }
    let mut out: BTreeMap<StrategyKind, BTreeMap<usize, usize>> = BTreeMap::new();
    for run in runs {
        let hist = out.entry(run.strategy).or_default();
        for &layer in &run.removal_order {
            *hist.entry(layer).or_default() += 1;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub layers_removed: usize,
    pub aggregate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalRow {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub layers_remaining: usize,
    pub per_task: BTreeMap<String, f64>,
    pub aggregate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// One point per recorded step, plus the unpruned baseline at zero.
    pub curve: Vec<CurvePoint>,
    /// Final Full-mode scores, one row per run.
    pub finals: Vec<FinalRow>,
}

pub fn compare_runs(runs: &[PruneRun]) -> Comparison {
    let mut curve = Vec::new();
    let mut finals = Vec::new();
    for run in runs {
        curve.push(CurvePoint {
            strategy: run.strategy,
            seed: run.seed,
            layers_removed: 0,
            aggregate: run.baseline.aggregate,
        });
        for (i, step) in run.per_step.iter().enumerate() {
            curve.push(CurvePoint {
                strategy: run.strategy,
                seed: run.seed,
                layers_removed: i + 1,
                aggregate: step.eval.aggregate,
            });
        }
        if let Some(last) = run.per_step.last() {
            finals.push(FinalRow {
                strategy: run.strategy,
                seed: run.seed,
                layers_remaining: last.layers_remaining,
                per_task: last.eval.per_task.clone(),
                aggregate: last.eval.aggregate,
            });
        }
    }
    Comparison { curve, finals }
}

impl Comparison {
    /// Mean final aggregate per strategy.
    pub fn mean_final(&self) -> BTreeMap<StrategyKind, f64> {
        let mut sums: BTreeMap<StrategyKind, (f64, usize)> = BTreeMap::new();
        for row in &self.finals {
            let e = sums.entry(row.strategy).or_default();
            e.0 += row.aggregate;
            e.1 += 1;
        }
        sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }

    /// `layers_removed,strategy,aggregate` rows.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("layers_removed,strategy,aggregate\n");
        for p in &self.curve {
            out.push_str(&format!("{},{},{}\n", p.layers_removed, p.strategy, p.aggregate));
        }
        out
    }

    /// Final rows with one column per task, then the aggregate.
    pub fn table_csv(&self) -> String {
        let tasks: Vec<&String> = self.finals.first().map(|r| r.per_task.keys().collect()).unwrap_or_default();
        let mut out = String::from("strategy,seed,layers_remaining");
        for t in &tasks {
            out.push(',');
            out.push_str(t);
        }
        out.push_str(",aggregate\n");
        for row in &self.finals {
            out.push_str(&format!("{},{},{}", row.strategy, row.seed, row.layers_remaining));
            for t in &tasks {
                let v = row.per_task.get(*t).map_or(String::new(), |v| v.to_string());
                out.push(',');
                out.push_str(&v);
            }
            out.push_str(&format!(",{}\n", row.aggregate));
        }
        out
    }
}

/// `strategy,original_layer,count` rows.
pub fn histogram_csv(stats: &BTreeMap<StrategyKind, BTreeMap<usize, usize>>) -> String {
    let mut out = String::from("strategy,original_layer,count\n");
    for (kind, hist) in stats {
        for (layer, count) in hist {
            out.push_str(&format!("{kind},{layer},{count}\n"));
        }
    }
    out
}

/// Directory name used for a run inside an output root.
pub fn run_dir_name(kind: StrategyKind, seed: u64) -> PathBuf {
    PathBuf::from(format!("{kind}-seed{seed}"))
}
