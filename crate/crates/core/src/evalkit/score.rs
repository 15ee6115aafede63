//! Aggregated normalized score across tasks:
//! `s(m) = 100/|T| · Σ_t (x_t(m) − min_t) / (max_t − min_t)`.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub models: Vec<String>,
    pub tasks: Vec<String>,
    /// `values[m][t]`.
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub task: String,
    pub metric_value: f64,
}

impl ScoreTable {
    /// Builds the full grid; models and tasks keep first-seen order.
    pub fn from_rows(rows: &[MetricRow]) -> Result<Self> {
        let mut models: Vec<String> = Vec::new();
        let mut tasks: Vec<String> = Vec::new();
        for r in rows {
            if !models.contains(&r.model) {
                models.push(r.model.clone());
            }
            if !tasks.contains(&r.task) {
                tasks.push(r.task.clone());
            }
        }
        let mut cells: Vec<Vec<Option<f64>>> = vec![vec![None; tasks.len()]; models.len()];
        for r in rows {
            if !r.metric_value.is_finite() {
                return Err(Error::Score(format!("{}/{} is not finite", r.model, r.task)));
            }
            let m = models.iter().position(|x| x == &r.model).unwrap();
            let t = tasks.iter().position(|x| x == &r.task).unwrap();
            if cells[m][t].replace(r.metric_value).is_some() {
                return Err(Error::Score(format!("duplicate cell {}/{}", r.model, r.task)));
            }
        }
        let mut values = Vec::with_capacity(models.len());
        for (m, row) in cells.into_iter().enumerate() {
            let mut out = Vec::with_capacity(tasks.len());
            for (t, v) in row.into_iter().enumerate() {
                out.push(v.ok_or_else(|| Error::Score(format!("missing cell {}/{}", models[m], tasks[t])))?);
            }
            values.push(out);
        }
        Ok(Self { models, tasks, values })
    }
}

/// Per-model score in `[0, 100]`, in table order. A task where every model
/// ties contributes 100 to all of them.
pub fn aggregate_score(table: &ScoreTable) -> Result<Vec<(String, f64)>> {
    if table.models.is_empty() || table.tasks.is_empty() {
        return Err(Error::Score("table has no models or no tasks".into()));
    }
    if table.values.len() != table.models.len() || table.values.iter().any(|r| r.len() != table.tasks.len()) {
        return Err(Error::Score("table is not a full models × tasks grid".into()));
    }
    let unique: BTreeSet<&String> = table.models.iter().collect();
    if unique.len() != table.models.len() {
        return Err(Error::Score("duplicate model id".into()));
    }
    let n_tasks = table.tasks.len();
    let mut sums = vec![0.0; table.models.len()];
    for t in 0..n_tasks {
        let col: Vec<f64> = table.values.iter().map(|r| r[t]).collect();
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (s, x) in sums.iter_mut().zip(&col) {
            *s += if hi > lo { (x - lo) / (hi - lo) } else { 1.0 };
        }
    }
    Ok(table
        .models
        .iter()
        .zip(sums)
        .map(|(m, s)| (m.clone(), 100.0 * s / n_tasks as f64))
        .collect())
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Score(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for r in rdr.deserialize() {
        rows.push(r.map_err(|e| Error::Score(format!("{}: {e}", path.display())))?);
    }
    Ok(rows)
}

/// Appends rows, writing the header when the file is new.
pub fn append_metrics(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    let path = path.as_ref();
    let fresh = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Score(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn format_scores(scores: &[(String, f64)]) -> String {
    let mut out = String::from("model,s_m\n");
    for (m, s) in scores {
        out.push_str(&format!("{m},{s:.4}\n"));
    }
    out
}
