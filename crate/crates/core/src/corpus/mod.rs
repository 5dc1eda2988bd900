//! Task-agnostic training records, their JSONL wire format, dataset
//! manifests, and the planted-topic synthetic corpus generator.

mod synth;

pub use synth::{
    generate_synthetic, PlantedModel, SynthConfig, SynthCorpus, TokenRole, IR_PREFIX_TOKEN,
    STS_PREFIX_TOKEN,
};

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which objective family a dataset feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "IR")]
    Ir,
    #[serde(rename = "STS")]
    Sts,
}

impl TaskKind {
    pub const ALL: [TaskKind; 2] = [TaskKind::Ir, TaskKind::Sts];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Ir => "IR",
            TaskKind::Sts => "STS",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "IR" | "ir" => Ok(TaskKind::Ir),
            "STS" | "sts" => Ok(TaskKind::Sts),
            other => Err(Error::Validation(format!("unknown task kind {other:?}"))),
        }
    }
}

/// One training example: `(task, query, positives, negatives, positive
/// scores, negative scores)`. Absent fields are empty lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnifiedRecord {
    #[serde(rename = "t")]
    pub task: TaskKind,
    #[serde(rename = "q")]
    pub query: String,
    #[serde(rename = "pos", default, skip_serializing_if = "Vec::is_empty")]
    pub positives: Vec<String>,
    #[serde(rename = "neg", default, skip_serializing_if = "Vec::is_empty")]
    pub negatives: Vec<String>,
    #[serde(rename = "pos_scores", default, skip_serializing_if = "Vec::is_empty")]
    pub positive_scores: Vec<f64>,
    #[serde(rename = "neg_scores", default, skip_serializing_if = "Vec::is_empty")]
    pub negative_scores: Vec<f64>,
}

impl UnifiedRecord {
    pub fn ir(query: impl Into<String>, positives: Vec<String>, negatives: Vec<String>) -> Self {
        Self {
            task: TaskKind::Ir,
            query: query.into(),
            positives,
            negatives,
            positive_scores: Vec::new(),
            negative_scores: Vec::new(),
        }
    }

    /// Checks the per-task shape rules.
    pub fn validate(&self) -> Result<()> {
        let scores = self.positive_scores.iter().chain(&self.negative_scores);
        for &s in scores {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Validation(format!(
                    "score {s} outside [0, 1]; normalize labels at ingestion"
                )));
            }
        }
        match self.task {
            TaskKind::Sts => {
                if self.positives.len() != 1 {
                    return Err(Error::Validation(
                        "STS requires exactly one positive".into(),
                    ));
                }
                if !self.negatives.is_empty() || !self.negative_scores.is_empty() {
                    return Err(Error::Validation("STS records carry no negatives".into()));
                }
                if self.positive_scores.len() != 1 {
                    return Err(Error::Validation(
                        "STS requires exactly one positive score".into(),
                    ));
                }
            }
            TaskKind::Ir => {
                if self.positives.is_empty() {
                    return Err(Error::Validation(
                        "IR requires at least one positive".into(),
                    ));
                }
                if !self.positive_scores.is_empty()
                    && self.positive_scores.len() != self.positives.len()
                {
                    return Err(Error::Validation(format!(
                        "IR record has {} positives but {} positive scores",
                        self.positives.len(),
                        self.positive_scores.len()
                    )));
                }
                if !self.negative_scores.is_empty()
                    && self.negative_scores.len() != self.negatives.len()
                {
                    return Err(Error::Validation(format!(
                        "IR record has {} negatives but {} negative scores",
                        self.negatives.len(),
                        self.negative_scores.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// STS label of this record.
    pub fn sts_label(&self) -> Option<f64> {
        match self.task {
            TaskKind::Sts => self.positive_scores.first().copied(),
            TaskKind::Ir => None,
        }
    }

    /// Canonical single-line JSON form.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Parses and validates one JSONL line.
pub fn parse_record(line: &str) -> Result<UnifiedRecord> {
    parse_record_at(line, 1)
}

fn parse_record_at(line: &str, line_no: usize) -> Result<UnifiedRecord> {
    let record: UnifiedRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        column: e.column(),
        message: e.to_string(),
    })?;
    record.validate()?;
    Ok(record)
}

/// Parses a JSONL document; blank lines are skipped.
pub fn parse_jsonl(text: &str) -> Result<Vec<UnifiedRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_record_at(l, i + 1).map_err(|e| match e {
                Error::Validation(m) => Error::Validation(format!("line {}: {m}", i + 1)),
                other => other,
            })
        })
        .collect()
}

pub fn to_jsonl(records: &[UnifiedRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_json_line());
        out.push('\n');
    }
    out
}

pub fn read_jsonl(path: &Path) -> Result<Vec<UnifiedRecord>> {
    parse_jsonl(&std::fs::read_to_string(path)?)
}

pub fn write_jsonl(path: &Path, records: &[UnifiedRecord]) -> Result<()> {
    std::fs::write(path, to_jsonl(records))?;
    Ok(())
}

/// Min-max label scale fitted over a raw STS dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelScale {
    pub min: f64,
    pub max: f64,
}

impl LabelScale {
    pub fn fit(raw: &[f64]) -> Result<Self> {
        let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if raw.is_empty() || !min.is_finite() || !max.is_finite() {
            return Err(Error::Validation(
                "cannot fit label scale to no finite labels".into(),
            ));
        }
        Ok(Self { min, max })
    }

    /// `(y - min) / (max - min)`; a degenerate scale maps every label to 1.
    pub fn normalize(&self, y: f64) -> f64 {
        if self.max > self.min {
            (y - self.min) / (self.max - self.min)
        } else {
            1.0
        }
    }
}

/// Maps an `(x1, x2, y)` triple with `y` already in `[0, 1]`.
pub fn from_sts_triple(x1: &str, x2: &str, y: f64) -> Result<UnifiedRecord> {
    if !(0.0..=1.0).contains(&y) {
        return Err(Error::Range(format!("STS label {y} outside [0, 1]")));
    }
    Ok(UnifiedRecord {
        task: TaskKind::Sts,
        query: x1.to_string(),
        positives: vec![x2.to_string()],
        negatives: Vec::new(),
        positive_scores: vec![y],
        negative_scores: Vec::new(),
    })
}

/// Ingests raw triples, normalizing labels with a scale fitted over the
/// whole dataset.
pub fn ingest_sts_triples(triples: &[(String, String, f64)]) -> Result<Vec<UnifiedRecord>> {
    let raw: Vec<f64> = triples.iter().map(|t| t.2).collect();
    let scale = LabelScale::fit(&raw)?;
    triples
        .iter()
        .map(|(a, b, y)| from_sts_triple(a, b, scale.normalize(*y)))
        .collect()
}

/// Whitespace tokenizer over the integer token vocabulary.
pub fn tokenize(text: &str) -> Result<Vec<u32>> {
    text.split_whitespace()
        .map(|t| {
            t.parse::<u32>()
                .map_err(|_| Error::Validation(format!("token {t:?} is not an integer id")))
        })
        .collect()
}

pub fn detokenize(tokens: &[u32]) -> String {
    let mut s = String::with_capacity(tokens.len() * 4);
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&t.to_string());
    }
    s
}

/// Which split a manifest entry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub path: PathBuf,
    pub task: TaskKind,
    pub split: Split,
}

/// Sidecar file listing dataset files, their task, and per-task batch sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub batch_size_ir: usize,
    pub batch_size_sts: usize,
    pub datasets: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn batch_size(&self, task: TaskKind) -> usize {
        match task {
            TaskKind::Ir => self.batch_size_ir,
            TaskKind::Sts => self.batch_size_sts,
        }
    }

    /// Loads every dataset of `split`, resolving paths against `base_dir`
    /// and checking each record's task against the entry.
    pub fn load_split(&self, base_dir: &Path, split: Split) -> Result<Vec<Dataset>> {
        self.datasets
            .iter()
            .filter(|e| e.split == split)
            .map(|e| {
                let records = read_jsonl(&base_dir.join(&e.path))?;
                if let Some((i, r)) = records.iter().enumerate().find(|(_, r)| r.task != e.task) {
                    return Err(Error::Validation(format!(
                        "{}: record {} has task {} but the manifest declares {}",
                        e.name,
                        i + 1,
                        r.task,
                        e.task
                    )));
                }
                Ok(Dataset {
                    name: e.name.clone(),
                    task: e.task,
                    records,
                })
            })
            .collect()
    }
}

/// A named, single-task collection of records.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub task: TaskKind,
    pub records: Vec<UnifiedRecord>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        task: TaskKind,
        records: Vec<UnifiedRecord>,
    ) -> Result<Self> {
        let name = name.into();
        for (i, r) in records.iter().enumerate() {
            if r.task != task {
                return Err(Error::Validation(format!(
                    "{name}: record {i} has task {} in a {task} dataset",
                    r.task
                )));
            }
        }
        Ok(Self {
            name,
            task,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
