//! JSONL question-answer records.
//!
//! One JSON object per line:
//! `{"id": "...", "image_ref": "slot0=A slot1=C ...", "question": "...", "answer": {...}}`.
//! For synthetic data `image_ref` holds the attribute map, so a record
//! round-trips to a [`SyntheticTask`].

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{task_from_parts, SyntheticTask};
use crate::rewards::Answer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub image_ref: String,
    pub question: String,
    pub answer: Answer,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Per-line problems found while loading.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub lines: usize,
    pub valid: usize,
    /// `(1-based line, reason)`.
    pub invalid: Vec<(usize, String)>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.invalid.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} lines, {} valid, {} invalid", self.lines, self.valid, self.invalid.len())?;
        for (line, reason) in &self.invalid {
            write!(f, "\n  line {line}: {reason}")?;
        }
        Ok(())
    }
}

pub fn records_from_tasks(tasks: &[SyntheticTask]) -> Vec<QaRecord> {
    tasks
        .iter()
        .map(|t| QaRecord {
            id: t.task_id.clone(),
            image_ref: t.image_ref(),
            question: t.question_text(),
            answer: t.gold.clone(),
        })
        .collect()
}

pub fn save_records(path: &Path, records: &[QaRecord]) -> Result<(), DataError> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("records serialize"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| DataError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Parses JSONL text, keeping valid records and reporting the rest. A record
/// is invalid when it does not parse, its answer is malformed, its id repeats
/// an earlier one, or (for synthetic data) its gold answer disagrees with the
/// image attributes.
pub fn parse_records(text: &str, k: usize, v: usize) -> (Vec<QaRecord>, ValidationReport) {
    let mut report = ValidationReport::default();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        let lineno = i + 1;
        let rec: QaRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                report.invalid.push((lineno, format!("malformed record: {e}")));
                continue;
            }
        };
        if let Err(e) = rec.answer.validate() {
            report.invalid.push((lineno, format!("bad answer: {e}")));
            continue;
        }
        if !seen.insert(rec.id.clone()) {
            report.invalid.push((lineno, format!("duplicate id `{}`", rec.id)));
            continue;
        }
        match task_from_parts(&rec.id, &rec.question, &rec.image_ref, k, v) {
            Ok(task) if task.gold.value != rec.answer.value => {
                report.invalid.push((
                    lineno,
                    format!("answer `{}` disagrees with the image (expected `{}`)", rec.answer.value, task.gold.value),
                ));
                continue;
            }
            Ok(_) => {}
            Err(e) => {
                report.invalid.push((lineno, e.to_string()));
                continue;
            }
        }
        report.valid += 1;
        out.push(rec);
    }
    (out, report)
}

pub fn load_records(path: &Path, k: usize, v: usize) -> Result<(Vec<QaRecord>, ValidationReport), DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_owned(),
        source,
    })?;
    Ok(parse_records(&text, k, v))
}

/// Rebuilds synthetic tasks from validated records.
pub fn tasks_from_records(records: &[QaRecord], k: usize, v: usize) -> Vec<SyntheticTask> {
    records
        .iter()
        .filter_map(|r| task_from_parts(&r.id, &r.question, &r.image_ref, k, v).ok())
        .collect()
}
