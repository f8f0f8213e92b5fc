use std::collections::BTreeMap;
use std::path::Path;

use super::metrics::MetricKind;
use crate::error::{Error, Result};
use crate::vocab::VocabSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Single,
    Pair,
    Regression,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LabelSpace {
    /// Labels `0..n`; `names[i]` spells class `i` in TSV files when given.
    Classes { n: usize, names: Vec<String> },
    Real,
}

impl LabelSpace {
    pub fn classes(n: usize) -> Self {
        LabelSpace::Classes { n, names: Vec::new() }
    }

    pub fn contains(&self, label: f64) -> bool {
        match self {
            LabelSpace::Classes { n, .. } => label.fract() == 0.0 && label >= 0.0 && label < *n as f64,
            LabelSpace::Real => label.is_finite(),
        }
    }

    fn parse(&self, raw: &str) -> Option<f64> {
        match self {
            LabelSpace::Classes { names, .. } if !names.is_empty() => {
                names.iter().position(|n| n == raw).map(|i| i as f64)
            }
            _ => raw.parse().ok(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub text_a: Vec<u32>,
    pub text_b: Option<Vec<u32>>,
    /// Class index or regression target.
    pub label: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub name: String,
    pub kind: TaskKind,
    pub labels: LabelSpace,
    pub metric: MetricKind,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStats {
    pub train_rows: usize,
    pub dev_rows: usize,
    pub mean_tokens: f64,
    /// Examples per class label (classification tasks only).
    pub label_counts: BTreeMap<u64, usize>,
}

impl TaskDataset {
    pub fn validate(&self) -> Result<()> {
        for (split, rows) in [("train", &self.train), ("dev", &self.dev)] {
            if rows.is_empty() {
                return Err(Error::Data(format!("{}: {split} split is empty", self.name)));
            }
            if let Some((i, ex)) = rows.iter().enumerate().find(|(_, e)| !self.labels.contains(e.label)) {
                return Err(Error::Data(format!(
                    "{}: {split} row {i} has label {} outside the label space",
                    self.name, ex.label
                )));
            }
            if self.kind == TaskKind::Pair && rows.iter().any(|e| e.text_b.is_none()) {
                return Err(Error::Data(format!("{}: pair task row without text_b", self.name)));
            }
        }
        Ok(())
    }

    pub fn stats(&self) -> TaskStats {
        let all = self.train.iter().chain(&self.dev);
        let n = self.train.len() + self.dev.len();
        let tokens: usize = all
            .clone()
            .map(|e| e.text_a.len() + e.text_b.as_ref().map_or(0, Vec::len))
            .sum();
        let mut label_counts = BTreeMap::new();
        if let LabelSpace::Classes { .. } = self.labels {
            for e in all {
                *label_counts.entry(e.label as u64).or_insert(0) += 1;
            }
        }
        TaskStats {
            train_rows: self.train.len(),
            dev_rows: self.dev.len(),
            mean_tokens: if n == 0 { 0.0 } else { tokens as f64 / n as f64 },
            label_counts,
        }
    }

    pub fn golds(&self) -> Vec<f64> {
        self.dev.iter().map(|e| e.label).collect()
    }
}

/// Declared columns and label space of a TSV task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSchema {
    pub name: String,
    pub kind: TaskKind,
    pub labels: LabelSpace,
    pub metric: MetricKind,
}

impl TaskSchema {
    /// Table 1 task definitions with their caption's metrics (CoLA as Matthews).
    pub fn glue(name: &str) -> Option<Self> {
        let (kind, labels, metric) = match name {
            "CoLA" => (TaskKind::Single, LabelSpace::classes(2), MetricKind::Matthews),
            "SST-2" => (TaskKind::Single, LabelSpace::classes(2), MetricKind::Accuracy),
            "MRPC" | "QQP" => (TaskKind::Pair, LabelSpace::classes(2), MetricKind::F1Binary),
            "STS-B" => (TaskKind::Regression, LabelSpace::Real, MetricKind::Spearman),
            "QNLI" | "RTE" => (
                TaskKind::Pair,
                LabelSpace::Classes {
                    n: 2,
                    names: vec!["entailment".into(), "not_entailment".into()],
                },
                MetricKind::Accuracy,
            ),
            "MNLI" | "MNLI-m" | "MNLI-mm" => (
                TaskKind::Pair,
                LabelSpace::Classes {
                    n: 3,
                    names: vec!["entailment".into(), "neutral".into(), "contradiction".into()],
                },
                MetricKind::Accuracy,
            ),
            _ => return None,
        };
        Some(Self {
            name: name.to_string(),
            kind,
            labels,
            metric,
        })
    }
}

/// Parses one TSV split. STS-B pairs are regression tasks with two texts.
pub fn parse_split(text: &str, schema: &TaskSchema, vocab: &VocabSpec) -> Result<Vec<Example>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split('\t').collect();
    let col = |name: &str| header.iter().position(|h| h.trim() == name);
    let a = col("text_a").ok_or_else(|| Error::Schema(format!("{}: missing column text_a", schema.name)))?;
    let label = col("label").ok_or_else(|| Error::Schema(format!("{}: missing column label", schema.name)))?;
    let b = col("text_b");
    if schema.kind == TaskKind::Pair && b.is_none() {
        return Err(Error::Schema(format!("{}: pair task needs column text_b", schema.name)));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let get = |c: usize| {
            fields.get(c).copied().ok_or_else(|| Error::Schema(format!("{}: row {} lacks column {c}", schema.name, i + 2)))
        };
        let raw = get(label)?.trim();
        let value = schema
            .labels
            .parse(raw)
            .filter(|&v| schema.labels.contains(v))
            .ok_or_else(|| Error::Data(format!("{}: row {} label {raw:?} outside the label space", schema.name, i + 2)))?;
        out.push(Example {
            text_a: vocab.encode(get(a)?),
            text_b: b.map(|c| get(c).map(|t| vocab.encode(t))).transpose()?,
            label: value,
        });
    }
    Ok(out)
}

/// Loads a task from `train.tsv` and `dev.tsv` files.
pub fn load_task(train: &Path, dev: &Path, schema: &TaskSchema, vocab: &VocabSpec) -> Result<TaskDataset> {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
    let task = TaskDataset {
        name: schema.name.clone(),
        kind: schema.kind,
        labels: schema.labels.clone(),
        metric: schema.metric,
        train: parse_split(&read(train)?, schema, vocab)?,
        dev: parse_split(&read(dev)?, schema, vocab)?,
    };
    task.validate()?;
    Ok(task)
}
