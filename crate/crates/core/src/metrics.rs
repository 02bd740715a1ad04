//! Per-step training metrics and their CSV log.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub mean_output_length: f64,
    pub format_reward_rate: f64,
    pub accuracy_reward_rate: f64,
    pub caption_reward_rate: Option<f64>,
    pub length_reward_mean: Option<f64>,
    pub mean_total_reward: f64,
    pub kl_value: f64,
    pub beta_hat: f64,
    pub empty_think_rate: f64,
    /// Cumulative judge failures (timeouts, transport, malformed replies).
    pub judge_errors: u64,
    pub objective: f64,
    pub grad_norm: f64,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub test_easy_accuracy: Option<f64>,
    pub test_hard_accuracy: Option<f64>,
}

pub const COLUMNS: [&str; 17] = [
    "step",
    "mean_output_length",
    "format_reward_rate",
    "accuracy_reward_rate",
    "caption_reward_rate",
    "length_reward_mean",
    "mean_total_reward",
    "kl_value",
    "beta_hat",
    "empty_think_rate",
    "judge_errors",
    "objective",
    "grad_norm",
    "train_accuracy",
    "test_accuracy",
    "test_easy_accuracy",
    "test_hard_accuracy",
];

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl StepMetrics {
    /// One CSV row; optional values are left empty.
    pub fn csv_row(&self) -> String {
        [
            self.step.to_string(),
            self.mean_output_length.to_string(),
            self.format_reward_rate.to_string(),
            self.accuracy_reward_rate.to_string(),
            opt(self.caption_reward_rate),
            opt(self.length_reward_mean),
            self.mean_total_reward.to_string(),
            self.kl_value.to_string(),
            self.beta_hat.to_string(),
            self.empty_think_rate.to_string(),
            self.judge_errors.to_string(),
            self.objective.to_string(),
            self.grad_norm.to_string(),
            opt(self.train_accuracy),
            opt(self.test_accuracy),
            opt(self.test_easy_accuracy),
            opt(self.test_hard_accuracy),
        ]
        .join(",")
    }
}

pub fn header() -> String {
    COLUMNS.join(",")
}

/// Appends rows to a metrics CSV.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Opens `path` for a run that continues from `from_step`: rows for
    /// later steps (left by an interrupted run) are dropped first.
    pub fn open(path: &Path, from_step: u64) -> Result<Self, MetricsError> {
        let io = |source| MetricsError::Io {
            path: path.to_owned(),
            source,
        };
        let mut keep = vec![header()];
        if from_step > 0 && path.exists() {
            let text = fs::read_to_string(path).map_err(io)?;
            for line in text.lines().skip(1) {
                let step: u64 = line
                    .split(',')
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| MetricsError::Format {
                        path: path.to_owned(),
                        message: format!("bad row `{line}`"),
                    })?;
                if step < from_step {
                    keep.push(line.to_owned());
                }
            }
        }
        let mut text = keep.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(io)?;
        let file = OpenOptions::new().append(true).open(path).map_err(io)?;
        Ok(MetricsWriter {
            path: path.to_owned(),
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<(), MetricsError> {
        writeln!(self.out, "{}", m.csv_row()).map_err(|source| MetricsError::Io {
            path: self.path.clone(),
            source,
        })
    }

    pub fn flush(&mut self) -> Result<(), MetricsError> {
        self.out.flush().map_err(|source| MetricsError::Io {
            path: self.path.clone(),
            source,
        })
    }
}

/// Reads a metrics CSV as one column-name → value map per row.
pub fn read_metrics(path: &Path) -> Result<Vec<BTreeMap<String, String>>, MetricsError> {
    let text = fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut lines = text.lines();
    let cols: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let vals: Vec<&str> = l.split(',').collect();
            if vals.len() != cols.len() {
                return Err(MetricsError::Format {
                    path: path.to_owned(),
                    message: format!("row has {} fields, header has {}", vals.len(), cols.len()),
                });
            }
            Ok(cols.iter().zip(vals).map(|(c, v)| (c.to_string(), v.to_owned())).collect())
        })
        .collect()
}

/// Converts a metrics CSV to JSON lines, keeping only `columns` when given.
/// Empty cells become `null`, numeric cells become numbers.
pub fn export_json_lines(path: &Path, columns: Option<&[String]>) -> Result<String, MetricsError> {
    let rows = read_metrics(path)?;
    let mut out = String::new();
    for row in rows {
        let mut obj = serde_json::Map::new();
        for (k, v) in row {
            if columns.is_some_and(|cs| !cs.iter().any(|c| *c == k)) {
                continue;
            }
            let val = if v.is_empty() {
                serde_json::Value::Null
            } else if let Ok(x) = v.parse::<f64>() {
                serde_json::json!(x)
            } else {
                serde_json::Value::String(v)
            };
            obj.insert(k, val);
        }
        out.push_str(&serde_json::Value::Object(obj).to_string());
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(step: u64) -> StepMetrics {
        StepMetrics {
            step,
            mean_output_length: 10.5,
            format_reward_rate: 1.0,
            accuracy_reward_rate: 0.25,
            caption_reward_rate: None,
            length_reward_mean: Some(0.5),
            mean_total_reward: 1.3,
            kl_value: 0.01,
            beta_hat: 0.04,
            empty_think_rate: 0.0,
            judge_errors: 0,
            objective: 0.0,
            grad_norm: 1.0,
            train_accuracy: None,
            test_accuracy: Some(0.5),
            test_easy_accuracy: None,
            test_hard_accuracy: None,
        }
    }

    #[test]
    fn truncates_rows_past_resume_point() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut w = MetricsWriter::open(&p, 0).unwrap();
        for s in 0..5 {
            w.write(&m(s)).unwrap();
        }
        w.flush().unwrap();
        drop(w);
        let mut w = MetricsWriter::open(&p, 3).unwrap();
        w.write(&m(3)).unwrap();
        w.flush().unwrap();
        let rows = read_metrics(&p).unwrap();
        let steps: Vec<&str> = rows.iter().map(|r| r["step"].as_str()).collect();
        assert_eq!(steps, ["0", "1", "2", "3"]);
        assert_eq!(rows[0]["caption_reward_rate"], "");
        let json = export_json_lines(&p, Some(&["step".to_owned(), "test_accuracy".to_owned()])).unwrap();
        assert_eq!(json.lines().next().unwrap(), r#"{"step":0.0,"test_accuracy":0.5}"#);
    }
}
