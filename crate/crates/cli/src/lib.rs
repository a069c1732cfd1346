//! Pipeline commands behind the `depthlab` binary.
//!
//! Every command reads one [`RunConfig`] and writes under its output
//! directory:
//!
//! ```text
//! <out>/config.json
//! <out>/data/<task>.jsonl, corpus.txt
//! <out>/teacher/teacher.dlm, eval.json, train_log.jsonl
//! <out>/runs/<Strategy>-seed<s>/run.json, config.json, step_NN.dlm
//! <out>/eval/<model>.json
//! <out>/report/comparison.json, table.csv, curve.csv, removed_layers.csv, removed_layers.json
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use depthlab::distill::DistillConfig;
use depthlab::eval::desk::{calibration_sample, generate_desk, read_desk, task_specs, write_desk, DeskData, SuiteSizes};
use depthlab::eval::{evaluate, EvalMode, EvalReport, TaskSpec};
use depthlab::model::{load_model, save_model, ModelConfig, TransformerModel};
use depthlab::rng;
use depthlab::strategies::{
    compare_runs, histogram_csv, removed_layer_statistics, run_dir_name, run_strategy, Comparison, PruneRun,
    StrategyInputs, StrategyKind, RUN_FILE,
};
use depthlab::train::{corpus_windows, train_teacher, TeacherConfig, TrainLogEntry};
use depthlab::vocab::Vocab;
use depthlab::{Error, Result};
use serde::{Deserialize, Serialize};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_config() || matches!(err, Error::Missing(_)) {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub sizes: SuiteSizes,
    /// Share of each task's test items used for Probe-mode importance.
    pub probe_fraction: f64,
    /// Corpus lines used for Block Influence.
    pub calibration_size: usize,
    /// Corpus windows available to fine-tuning.
    pub finetune_windows: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            sizes: SuiteSizes::default(),
            probe_fraction: 0.25,
            calibration_size: 32,
            finetune_windows: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub strategies: Vec<StrategyKind>,
    pub k: usize,
    /// One campaign per strategy and seed; the seed drives probe subsets,
    /// calibration and fine-tuning batches.
    pub seeds: Vec<u64>,
    /// Original teacher indices that are never removed.
    pub protected: Vec<usize>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            strategies: StrategyKind::ALL.to_vec(),
            k: 2,
            seeds: vec![0],
            protected: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds data generation and teacher training.
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub prune: PruneConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::desk(Vocab::desk().len()),
            data: DataConfig::default(),
            teacher: TeacherConfig::default(),
            distill: DistillConfig::default(),
            prune: PruneConfig::default(),
            output_dir: PathBuf::from("runs/desk"),
        }
    }
}

fn unique<T: Ord>(items: &[T]) -> bool {
    items.iter().collect::<BTreeSet<_>>().len() == items.len()
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        if !value.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Missing(path.to_path_buf())
            } else {
                Error::Io {
                    path: path.to_path_buf(),
                    source: e,
                }
            }
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.model.validate()?;
        let vocab = Vocab::desk().len();
        if self.model.vocab_size != vocab {
            return bad(format!(
                "model.vocab_size is {} but the desk vocabulary has {vocab} entries",
                self.model.vocab_size
            ));
        }
        self.data.sizes.validate()?;
        if !(self.data.probe_fraction > 0.0 && self.data.probe_fraction <= 1.0) {
            return bad("data.probe_fraction must lie in (0, 1]".into());
        }
        if self.data.calibration_size == 0 {
            return bad("data.calibration_size must be positive".into());
        }
        if self.data.finetune_windows < self.distill.batch_size {
            return bad("data.finetune_windows must cover at least one fine-tuning batch".into());
        }
        self.teacher.validate()?;
        if self.teacher.seq_len > self.model.max_seq_len {
            return bad("teacher.seq_len exceeds model.max_seq_len".into());
        }
        self.distill.validate()?;
        if self.distill.max_seq_len > self.model.max_seq_len {
            return bad("distill.max_seq_len exceeds model.max_seq_len".into());
        }
        let p = &self.prune;
        let n = self.model.n_layers;
        if p.strategies.is_empty() || !unique(&p.strategies) {
            return bad("prune.strategies must be non-empty and free of duplicates".into());
        }
        if p.seeds.is_empty() || !unique(&p.seeds) {
            return bad("prune.seeds must be non-empty and free of duplicates".into());
        }
        if p.k == 0 || p.k >= n {
            return bad(format!("prune.k must satisfy 0 < k < n_layers ({n}), got {}", p.k));
        }
        if !unique(&p.protected) || p.protected.iter().any(|&l| l >= n) {
            return bad("prune.protected must hold distinct layer indices below n_layers".into());
        }
        if n - p.protected.len() < p.k {
            return bad("prune.k exceeds the number of unprotected layers".into());
        }
        if self.output_dir.as_os_str().is_empty() {
            return bad("output_dir must not be empty".into());
        }
        Ok(())
    }
}

/// Paths inside an output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Layout {
            root: cfg.output_dir.clone(),
        }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn teacher_dir(&self) -> PathBuf {
        self.root.join("teacher")
    }

    pub fn teacher_model(&self) -> PathBuf {
        self.teacher_dir().join("teacher.dlm")
    }

    pub fn teacher_eval(&self) -> PathBuf {
        self.teacher_dir().join("eval.json")
    }

    pub fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn run(&self, kind: StrategyKind, seed: u64) -> PathBuf {
        self.runs().join(run_dir_name(kind, seed))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, body).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_vec_pretty(value)?;
    body.push(b'\n');
    write(path, body)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let body = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(path.to_path_buf())
        } else {
            Error::Io {
                path: path.to_path_buf(),
                source: e,
            }
        }
    })?;
    Ok(serde_json::from_slice(&body)?)
}

fn snapshot(cfg: &RunConfig) -> Result<()> {
    write_json(&Layout::new(cfg).root.join("config.json"), cfg)
}

/// Writes the seven task files and the corpus.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<DeskData> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let data = generate_desk(cfg.seed, &cfg.data.sizes)?;
    write_desk(&data, &layout.data())?;
    snapshot(cfg)?;
    Ok(data)
}

fn suite(cfg: &RunConfig, data: &DeskData, seed: u64) -> Result<Vec<TaskSpec>> {
    task_specs(data, &Vocab::desk(), cfg.data.probe_fraction, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherOutcome {
    pub eval: EvalReport,
    pub log: Vec<TrainLogEntry>,
}

/// Trains the teacher on the generated data and records its Full-mode report.
pub fn cmd_train_teacher(cfg: &RunConfig) -> Result<TeacherOutcome> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let data = read_desk(&layout.data())?;
    let vocab = Vocab::desk();
    let init = TransformerModel::new(cfg.model.clone(), rng::child_seed(cfg.seed, "teacher/init"))?;
    let (teacher, log) = train_teacher(&init, &data, &vocab, &cfg.teacher, rng::child_seed(cfg.seed, "teacher/train"))?;
    save_model(&teacher, &layout.teacher_model())?;
    let eval = evaluate(&teacher, &suite(cfg, &data, cfg.seed)?, EvalMode::Full)?;
    write_json(&layout.teacher_eval(), &eval)?;
    let mut lines = String::new();
    for e in &log {
        lines.push_str(&serde_json::to_string(e)?);
        lines.push('\n');
    }
    write(&layout.teacher_dir().join("train_log.jsonl"), lines)?;
    snapshot(cfg)?;
    Ok(TeacherOutcome { eval, log })
}

/// Runs every configured strategy for every prune seed against the saved teacher.
pub fn cmd_prune(cfg: &RunConfig) -> Result<Vec<PruneRun>> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let data = read_desk(&layout.data())?;
    let teacher = load_model(&layout.teacher_model())?;
    if teacher.config() != &cfg.model {
        return Err(Error::Config(
            "saved teacher does not match the configured model shape".into(),
        ));
    }
    let vocab = Vocab::desk();
    let mut runs = Vec::new();
    for &seed in &cfg.prune.seeds {
        let suite = suite(cfg, &data, seed)?;
        let calibration = calibration_sample(&data.corpus, &vocab, cfg.data.calibration_size, seed)?;
        let corpus = corpus_windows(
            &data.corpus,
            &vocab,
            cfg.distill.max_seq_len,
            cfg.data.finetune_windows,
            seed,
        )?;
        for &kind in &cfg.prune.strategies {
            let dir = layout.run(kind, seed);
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::Io {
                    path: dir.clone(),
                    source: e,
                })?;
            }
            write_json(&dir.join("config.json"), cfg)?;
            let inputs = StrategyInputs {
                teacher: &teacher,
                suite: &suite,
                corpus: &corpus,
                calibration: &calibration,
                distill: &cfg.distill,
                protected: &cfg.prune.protected,
            };
            runs.push(run_strategy(kind, cfg.prune.k, inputs, seed, Some(&dir))?);
        }
    }
    snapshot(cfg)?;
    Ok(runs)
}

/// Full-mode report for a saved model; defaults to the teacher.
pub fn cmd_eval(cfg: &RunConfig, model_path: Option<&Path>) -> Result<EvalReport> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let path = model_path.map_or_else(|| layout.teacher_model(), Path::to_path_buf);
    let data = read_desk(&layout.data())?;
    let model = load_model(&path)?;
    if model.config().vocab_size != Vocab::desk().len() {
        return Err(Error::Config(format!("{} does not use the desk vocabulary", path.display())));
    }
    let report = evaluate(&model, &suite(cfg, &data, cfg.seed)?, EvalMode::Full)?;
    let stem = path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    write_json(&layout.root.join("eval").join(format!("{stem}.json")), &report)?;
    Ok(report)
}

/// Run directories under `<out>/runs`, sorted by name.
pub fn discover_runs(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let runs = Layout::new(cfg).runs();
    let entries = fs::read_dir(&runs).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(runs.clone())
        } else {
            Error::Io {
                path: runs.clone(),
                source: e,
            }
        }
    })?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Error::Io {
                path: runs.clone(),
                source: e,
            })?
            .path();
        if path.join(RUN_FILE).exists() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Comparison table, curve data and removed-layer histogram over `run_dirs`
/// (all runs under the output directory when empty).
pub fn cmd_report(cfg: &RunConfig, run_dirs: &[PathBuf]) -> Result<Comparison> {
    cfg.validate()?;
    let dirs = if run_dirs.is_empty() {
        discover_runs(cfg)?
    } else {
        run_dirs.to_vec()
    };
    let runs = dirs.iter().map(|d| PruneRun::load(d)).collect::<Result<Vec<_>>>()?;
    if runs.is_empty() {
        return Err(Error::Missing(Layout::new(cfg).runs().join(RUN_FILE)));
    }
    let comparison = compare_runs(&runs);
    let stats = removed_layer_statistics(&runs)?;
    let out = Layout::new(cfg).report();
    write_json(&out.join("comparison.json"), &comparison)?;
    write(&out.join("table.csv"), comparison.table_csv())?;
    write(&out.join("curve.csv"), comparison.curve_csv())?;
    write(&out.join("removed_layers.csv"), histogram_csv(&stats))?;
    write_json(&out.join("removed_layers.json"), &stats)?;
    Ok(comparison)
}

/// Stored training-time report of the teacher.
pub fn stored_teacher_eval(cfg: &RunConfig) -> Result<EvalReport> {
    read_json(&Layout::new(cfg).teacher_eval())
}
