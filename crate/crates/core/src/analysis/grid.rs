//! Ablation grids: a base job plus axes of override values.
//!
//! Grid file:
//! ```toml
//! base = "job.toml"              # path relative to the grid file, or an inline [base] table
//!
//! [budget]                       # overrides applied to every cell
//! "run.max_steps" = 50
//!
//! [[axis]]
//! path = "recipe.base_lr"
//! values = [2e-3, 5e-3]
//!
//! [[axis]]                       # a table value sets several paths together
//! path = "hard"
//! values = [{ "recipe.label_loss" = "CE" }, { "recipe.label_loss" = "NONE", alpha = 0.0 }]
//! ```

use std::path::Path;

use serde::Serialize;
use toml::{Table, Value};

use crate::config::{merge_overrides, parse_job, DistillJobSpec, Overrides};
use crate::error::{Error, Result};
use crate::run::MetricsRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub path: String,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub base: DistillJobSpec,
    pub axes: Vec<GridAxis>,
    pub budget: Overrides,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub index: usize,
    /// One `(path, value)` per axis, in axis order.
    pub assignment: Vec<(String, Value)>,
    pub spec: DistillJobSpec,
}

impl GridCell {
    pub fn hash(&self) -> String {
        self.spec.identity_hash()
    }
}

impl GridSpec {
    pub fn cell_count(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }

    /// Cells in row-major order (last axis varies fastest).
    pub fn cells(&self) -> Result<Vec<GridCell>> {
        let mut seen = std::collections::BTreeSet::new();
        for a in &self.axes {
            if a.values.is_empty() {
                return Err(Error::Config(format!("grid axis `{}` has no values", a.path)));
            }
            if !seen.insert(a.path.as_str()) {
                return Err(Error::Config(format!("grid axis `{}` declared twice", a.path)));
            }
        }
        (0..self.cell_count()).map(|i| self.cell(i)).collect()
    }

    pub fn cell(&self, index: usize) -> Result<GridCell> {
        let mut rem = index;
        let mut assignment = vec![(String::new(), Value::Boolean(false)); self.axes.len()];
        for (k, axis) in self.axes.iter().enumerate().rev() {
            let n = axis.values.len();
            assignment[k] = (axis.path.clone(), axis.values[rem % n].clone());
            rem /= n;
        }
        let mut overrides = self.budget.clone();
        for (path, value) in &assignment {
            match value {
                Value::Table(linked) => overrides.extend(linked.iter().map(|(k, v)| (k.clone(), v.clone()))),
                v => {
                    overrides.insert(path.clone(), v.clone());
                }
            }
        }
        let mut spec = merge_overrides(&self.base, &overrides)?;
        if !self.axes.is_empty() {
            spec.name = format!("{}-cell{index:03}", self.base.name);
        }
        Ok(GridCell { index, assignment, spec })
    }
}

pub fn parse_grid(text: &str, base_dir: &Path) -> Result<GridSpec> {
    let mut tree: Table = text
        .parse()
        .map_err(|e| Error::Config(format!("malformed grid config: {e}")))?;
    let base = match tree.remove("base") {
        Some(Value::String(p)) => {
            let path = base_dir.join(p);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            parse_job(&text)?
        }
        Some(Value::Table(t)) => parse_job(&toml::to_string(&t).expect("table serializes"))?,
        _ => return Err(Error::Config("grid needs `base` (path or table)".into())),
    };
    let budget = match tree.remove("budget") {
        None => Overrides::new(),
        Some(Value::Table(t)) => t.into_iter().collect(),
        Some(_) => return Err(Error::Config("grid `budget` must be a table".into())),
    };
    let mut axes = Vec::new();
    if let Some(v) = tree.remove("axis") {
        let Value::Array(list) = v else {
            return Err(Error::Config("grid `axis` must be an array of tables".into()));
        };
        for item in list {
            let Value::Table(mut t) = item else {
                return Err(Error::Config("grid axis must be a table".into()));
            };
            let path = match t.remove("path") {
                Some(Value::String(p)) => p,
                _ => return Err(Error::Config("grid axis needs a string `path`".into())),
            };
            let values = match t.remove("values") {
                Some(Value::Array(v)) => v,
                _ => return Err(Error::Config(format!("grid axis `{path}` needs a `values` array"))),
            };
            if let Some(k) = t.keys().next() {
                return Err(Error::ConfigKey(format!("axis.{k}")));
            }
            axes.push(GridAxis { path, values });
        }
    }
    if let Some(k) = tree.keys().next() {
        return Err(Error::ConfigKey(k.clone()));
    }
    let grid = GridSpec { base, axes, budget };
    grid.cells()?;
    Ok(grid)
}

pub fn load_grid(path: &Path) -> Result<GridSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_grid(&text, path.parent().unwrap_or(Path::new(".")))
}

fn display_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Table(t) => t.iter().map(|(k, v)| format!("{k}={}", display_value(v))).collect::<Vec<_>>().join(";"),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellOutcome {
    Done { run_id: String, metrics: MetricsRecord },
    Failed { run_id: String, error: String },
}

#[derive(Serialize)]
struct CsvRow {
    cell: usize,
    run_id: String,
    status: &'static str,
    top1: Option<f64>,
    top5: Option<f64>,
    loss_total: Option<f64>,
    error: String,
}

/// Consolidated grid CSV: cell index, one column per axis, then outcome.
pub fn grid_csv(grid: &GridSpec, results: &[(GridCell, CellOutcome)]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let err = |e: csv::Error| Error::Report(e.to_string());
    let mut header = vec!["cell".to_string()];
    header.extend(grid.axes.iter().map(|a| a.path.clone()));
    header.extend(["run_id", "status", "top1", "top5", "loss_total", "error"].map(String::from));
    w.write_record(&header).map_err(err)?;
    for (cell, outcome) in results {
        let row = match outcome {
            CellOutcome::Done { run_id, metrics } => CsvRow {
                cell: cell.index,
                run_id: run_id.clone(),
                status: "ok",
                top1: Some(metrics.top1),
                top5: Some(metrics.top5),
                loss_total: Some(metrics.loss_total),
                error: String::new(),
            },
            CellOutcome::Failed { run_id, error } => CsvRow {
                cell: cell.index,
                run_id: run_id.clone(),
                status: "failed",
                top1: None,
                top5: None,
                loss_total: None,
                error: error.clone(),
            },
        };
        let mut rec = vec![row.cell.to_string()];
        rec.extend(cell.assignment.iter().map(|(_, v)| display_value(v)));
        rec.extend([
            row.run_id,
            row.status.to_string(),
            row.top1.map_or(String::new(), |v| v.to_string()),
            row.top5.map_or(String::new(), |v| v.to_string()),
            row.loss_total.map_or(String::new(), |v| v.to_string()),
            row.error,
        ]);
        w.write_record(&rec).map_err(err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Report(e.to_string()))?)
        .map_err(|e| Error::Report(e.to_string()))
}
