//! Synthetic seven-task suite and its distillation corpus.
//!
//! Every task prompt ends in `>` and every answer ends in a newline, so a
//! single greedy-decode convention serves all generative tasks.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Metric, TaskItem, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::rng;
use crate::vocab::Vocab;

pub const TASK_NAMES: [&str; 7] = [
    "facts_a",
    "facts_b",
    "summarize",
    "copy_doc",
    "copy_para",
    "trans_ab",
    "trans_ba",
];

pub const CORPUS_FILE: &str = "corpus.txt";

const COPY_DOC_LEN: usize = 16;
const COPY_PARA_LEN: usize = 8;
const COLORS: [&str; 12] = [
    "blue", "pink", "gold", "grey", "teal", "jade", "ruby", "navy", "rose", "sand", "lime", "plum",
];
const NOUNS: [&str; 16] = [
    "fox", "owl", "cat", "dog", "hen", "elk", "bee", "ant", "yak", "ram", "cow", "pig", "bat", "emu", "eel", "jay",
];
const DOC_TEMPLATES: [&str; 4] = [
    "the {} saw a {} by the {}",
    "a {} and a {} ran to the {}",
    "near the {} the {} ate a {}",
    "one {} met two {} at the {}",
];
const DICT_SIZE: usize = 12;
const SENTENCE_WORDS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSizes {
    /// Facts per multiple-choice family.
    pub facts: usize,
    /// Training-split items per task.
    pub train_items: usize,
    /// Test-split items per task.
    pub test_items: usize,
    pub corpus_lines: usize,
}

impl Default for SuiteSizes {
    fn default() -> Self {
        SuiteSizes {
            facts: 32,
            train_items: 400,
            test_items: 32,
            corpus_lines: 4000,
        }
    }
}

impl SuiteSizes {
    pub fn validate(&self) -> Result<()> {
        if self.facts < 4 || self.train_items == 0 || self.test_items == 0 || self.corpus_lines == 0 {
            return Err(Error::config(
                "suite sizes must be positive and provide at least four facts per family",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One line of a task file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub kind: TaskKind,
    pub split: Split,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<usize>,
}

impl Record {
    fn from_item(kind: TaskKind, split: Split, item: &TaskItem) -> Self {
        let mut r = Record {
            kind,
            split,
            prompt: item.prompt().to_string(),
            options: None,
            source: None,
            reference: None,
            answer: None,
        };
        match item {
            TaskItem::Choice { options, answer, .. } => {
                r.options = Some(options.clone());
                r.answer = Some(*answer);
            }
            TaskItem::Copy { source, .. } => r.source = Some(source.clone()),
            TaskItem::Generate { reference, .. } => r.reference = Some(reference.clone()),
        }
        r
    }

    pub fn into_item(self) -> Result<TaskItem> {
        let bad = |what: &str| Error::Format(format!("{:?} record without {what}", self.kind));
        Ok(match self.kind {
            TaskKind::MultipleChoice => TaskItem::Choice {
                options: self.options.clone().ok_or_else(|| bad("options"))?,
                answer: self.answer.ok_or_else(|| bad("answer"))?,
                prompt: self.prompt,
            },
            TaskKind::CopyDoc | TaskKind::CopyPara => TaskItem::Copy {
                source: self.source.clone().ok_or_else(|| bad("source"))?,
                prompt: self.prompt,
            },
            TaskKind::Transduce | TaskKind::Summarize => TaskItem::Generate {
                reference: self.reference.clone().ok_or_else(|| bad("reference"))?,
                prompt: self.prompt,
            },
        })
    }
}

/// Generated contents of one task file.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub name: String,
    pub kind: TaskKind,
    pub train: Vec<TaskItem>,
    pub test: Vec<TaskItem>,
}

/// Everything `build_desk_suite` writes.
#[derive(Clone, Debug, PartialEq)]
pub struct DeskData {
    pub tasks: Vec<TaskData>,
    pub corpus: Vec<String>,
}

fn pseudo_words(rng: &mut rng::Rng, pattern: &str, count: usize, taken: &mut BTreeSet<String>) -> Vec<String> {
    const CONS: &[u8] = b"bdfgklmnprstvz";
    const VOWS: &[u8] = b"aeiou";
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let w: String = pattern
            .bytes()
            .map(|p| {
                let set = if p == b'c' { CONS } else { VOWS };
                set[rng.gen_range(0..set.len())] as char
            })
            .collect();
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn choice_item(prompt: String, correct: &str, pool: &[String], rng: &mut rng::Rng) -> TaskItem {
    let mut options: Vec<String> = pool
        .iter()
        .filter(|v| v.as_str() != correct)
        .cloned()
        .collect::<Vec<_>>()
        .choose_multiple(rng, 3)
        .cloned()
        .collect();
    options.push(correct.to_string());
    options.shuffle(rng);
    let answer = options.iter().position(|o| o == correct).expect("correct option present");
    TaskItem::Choice { prompt, options, answer }
}

struct FactFamily {
    entities: Vec<String>,
    values: Vec<String>,
    assignment: Vec<usize>,
}

impl FactFamily {
    fn statement(&self, i: usize, b_family: bool) -> String {
        let (e, v) = (&self.entities[i], &self.values[self.assignment[i]]);
        if b_family {
            format!("{e} lives in {v}.")
        } else {
            format!("{e} is {v}.")
        }
    }

    fn question(&self, i: usize, b_family: bool, rng: &mut rng::Rng) -> TaskItem {
        let e = &self.entities[i];
        let prompt = if b_family {
            format!("home of {e}?>")
        } else {
            format!("color of {e}?>")
        };
        choice_item(prompt, &self.values[self.assignment[i]], &self.values, rng)
    }
}

fn copy_item(tag: &str, len: usize, rng: &mut rng::Rng) -> TaskItem {
    let source: String = (0..len).map(|_| (b'a' + rng.gen_range(0..26u8)) as char).collect();
    TaskItem::Copy {
        prompt: format!("{tag}: {source}>"),
        source,
    }
}

fn summary_item(rng: &mut rng::Rng) -> TaskItem {
    let template = DOC_TEMPLATES[rng.gen_range(0..DOC_TEMPLATES.len())];
    let words: Vec<&str> = NOUNS.choose_multiple(rng, 3).copied().collect();
    let mut doc = String::new();
    let mut it = words.iter();
    for (i, part) in template.split("{}").enumerate() {
        if i > 0 {
            doc.push_str(it.next().expect("three slots"));
        }
        doc.push_str(part);
    }
    TaskItem::Generate {
        prompt: format!("sum: {doc}>"),
        reference: words.join(" "),
    }
}

fn translation_item(tag: &str, from: &[String], to: &[String], rng: &mut rng::Rng) -> TaskItem {
    let idx: Vec<usize> = (0..SENTENCE_WORDS).map(|_| rng.gen_range(0..from.len())).collect();
    let src: Vec<&str> = idx.iter().map(|&i| from[i].as_str()).collect();
    let dst: Vec<&str> = idx.iter().map(|&i| to[i].as_str()).collect();
    TaskItem::Generate {
        prompt: format!("{tag}: {}>", src.join(" ")),
        reference: dst.join(" "),
    }
}

/// Deterministic contents of the desk suite for `seed`.
pub fn generate_desk(seed: u64, sizes: &SuiteSizes) -> Result<DeskData> {
    sizes.validate()?;
    let mut words_rng = rng::stream(seed, "desk/words");
    let mut taken = BTreeSet::new();
    let family = |rng: &mut rng::Rng, taken: &mut BTreeSet<String>, values: Vec<String>| {
        let entities = pseudo_words(rng, "cvcvc", sizes.facts, taken);
        let assignment = (0..sizes.facts).map(|_| rng.gen_range(0..values.len())).collect();
        FactFamily {
            entities,
            values,
            assignment,
        }
    };
    let fam_a = family(&mut words_rng, &mut taken, COLORS.iter().map(|s| s.to_string()).collect());
    let towns = pseudo_words(&mut words_rng, "cvccv", 10, &mut taken);
    let fam_b = family(&mut words_rng, &mut taken, towns);
    let lang_a = pseudo_words(&mut words_rng, "cvc", DICT_SIZE, &mut taken);
    let lang_b = pseudo_words(&mut words_rng, "vcvc", DICT_SIZE, &mut taken);

    let mut tasks = Vec::with_capacity(TASK_NAMES.len());
    for name in TASK_NAMES {
        let mut rng = rng::stream(seed, &format!("desk/task/{name}"));
        let (kind, make): (TaskKind, Box<dyn Fn(usize, &mut rng::Rng) -> TaskItem>) = match name {
            "facts_a" => (TaskKind::MultipleChoice, Box::new(|i, r| fam_a.question(i % sizes.facts, false, r))),
            "facts_b" => (TaskKind::MultipleChoice, Box::new(|i, r| fam_b.question(i % sizes.facts, true, r))),
            "summarize" => (TaskKind::Summarize, Box::new(|_, r| summary_item(r))),
            "copy_doc" => (TaskKind::CopyDoc, Box::new(|_, r| copy_item("copy", COPY_DOC_LEN, r))),
            "copy_para" => (TaskKind::CopyPara, Box::new(|_, r| copy_item("rep", COPY_PARA_LEN, r))),
            "trans_ab" => (TaskKind::Transduce, Box::new(|_, r| translation_item("ab", &lang_a, &lang_b, r))),
            _ => (TaskKind::Transduce, Box::new(|_, r| translation_item("ba", &lang_b, &lang_a, r))),
        };
        let train = (0..sizes.train_items).map(|i| make(i, &mut rng)).collect();
        let test = (0..sizes.test_items).map(|i| make(i, &mut rng)).collect();
        tasks.push(TaskData {
            name: name.to_string(),
            kind,
            train,
            test,
        });
    }

    let mut crng = rng::stream(seed, "desk/corpus");
    let mut corpus = Vec::with_capacity(sizes.corpus_lines);
    while corpus.len() < sizes.corpus_lines {
        let pick = crng.gen_range(0..10);
        let line = match pick {
            0 => fam_a.statement(crng.gen_range(0..sizes.facts), false),
            1 => fam_b.statement(crng.gen_range(0..sizes.facts), true),
            2 => {
                let i = crng.gen_range(0..DICT_SIZE);
                format!("{} means {}.", lang_a[i], lang_b[i])
            }
            _ => {
                let task = &tasks[crng.gen_range(0..tasks.len())];
                task.train[crng.gen_range(0..task.train.len())].training_text().trim_end().to_string()
            }
        };
        corpus.push(line);
    }
    Ok(DeskData { tasks, corpus })
}

fn task_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.jsonl"))
}

fn write_file(path: &Path, body: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body).map_err(|e| Error::io(path, e))
}

/// Writes the seven task files and the corpus into `dir`.
pub fn write_desk(data: &DeskData, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for task in &data.tasks {
        let mut body = Vec::new();
        for (split, items) in [(Split::Train, &task.train), (Split::Test, &task.test)] {
            for item in items.iter() {
                serde_json::to_writer(&mut body, &Record::from_item(task.kind, split, item))?;
                body.push(b'\n');
            }
        }
        write_file(&task_path(dir, &task.name), &body)?;
    }
    let mut corpus = data.corpus.join("\n");
    corpus.push('\n');
    write_file(&dir.join(CORPUS_FILE), corpus.as_bytes())
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads one task file back.
pub fn read_task(dir: &Path, name: &str) -> Result<TaskData> {
    let path = task_path(dir, name);
    let text = read_text(&path)?;
    let mut kind = None;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: Record = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if *kind.get_or_insert(rec.kind) != rec.kind {
            return Err(Error::Format(format!("{}: mixed task kinds", path.display())));
        }
        let split = rec.split;
        let item = rec.into_item()?;
        match split {
            Split::Train => train.push(item),
            Split::Test => test.push(item),
        }
    }
    let kind = kind.ok_or_else(|| Error::Format(format!("{} has no records", path.display())))?;
    Ok(TaskData {
        name: name.to_string(),
        kind,
        train,
        test,
    })
}

pub fn read_desk(dir: &Path) -> Result<DeskData> {
    let tasks = TASK_NAMES.iter().map(|n| read_task(dir, n)).collect::<Result<_>>()?;
    let corpus = read_text(&dir.join(CORPUS_FILE))?
        .lines()
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    Ok(DeskData { tasks, corpus })
}

/// Probe subset size for `fraction` of `n` items, at least one.
pub fn probe_size(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1))
}

/// Test-split task specs with the default metric for each kind.
pub fn task_specs(data: &DeskData, vocab: &Vocab, probe_fraction: f64, seed: u64) -> Result<Vec<TaskSpec>> {
    if !(probe_fraction > 0.0 && probe_fraction <= 1.0) {
        return Err(Error::config(format!("probe fraction {probe_fraction} is outside (0, 1]")));
    }
    data.tasks
        .iter()
        .map(|t| {
            TaskSpec::new(
                &t.name,
                t.kind,
                Metric::default_for(t.kind),
                t.test.clone(),
                probe_size(t.test.len(), probe_fraction),
                seed,
                vocab,
            )
        })
        .collect()
}

/// Generates the suite, writes it to `dir` and returns the evaluation specs.
pub fn build_desk_suite(seed: u64, sizes: &SuiteSizes, probe_fraction: f64, dir: &Path) -> Result<Vec<TaskSpec>> {
    let data = generate_desk(seed, sizes)?;
    let specs = task_specs(&data, &Vocab::desk(), probe_fraction, seed)?;
    write_desk(&data, dir)?;
    Ok(specs)
}

/// Seeded calibration sample of `count` corpus lines, in corpus order.
pub fn calibration_sample(corpus: &[String], vocab: &Vocab, count: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if corpus.is_empty() {
        return Err(Error::config("calibration needs a non-empty corpus"));
    }
    let mut rng = rng::stream(seed, "calibration");
    let mut idx = rand::seq::index::sample(&mut rng, corpus.len(), count.min(corpus.len())).into_vec();
    idx.sort_unstable();
    idx.iter().map(|&i| vocab.encode(&corpus[i])).collect()
}
