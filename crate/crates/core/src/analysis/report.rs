//! Run-set summaries written as CSV tables.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::gap::{gap_table_partial, gap_vs_scale, GapReport, MethodResult};
use crate::error::{Error, Result};
use crate::run::{read_metrics, MetricsRecord, RunManifest, METRICS_FILE};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub pair: String,
    pub method: String,
    pub scale: f64,
    pub epoch: u32,
    pub split: String,
    pub top1: f64,
    pub top5: f64,
    pub loss_total: f64,
}

impl RunSummary {
    pub fn as_result(&self) -> MethodResult {
        MethodResult {
            pair: self.pair.clone(),
            scale: self.scale,
            method: self.method.clone(),
            top1: self.top1,
        }
    }
}

/// Final evaluation record of a run: the last metrics line on the job's
/// eval split.
pub fn summarize_run(dir: &Path) -> Result<RunSummary> {
    let manifest = RunManifest::read(dir)?;
    let metrics = read_metrics(&dir.join(METRICS_FILE))?;
    let spec = &manifest.spec;
    let last: &MetricsRecord = metrics
        .iter()
        .rev()
        .find(|m| m.split == spec.eval_split)
        .ok_or_else(|| Error::Report(format!("run {} has no `{}` metrics", dir.display(), spec.eval_split)))?;
    Ok(RunSummary {
        run_id: manifest.run_id.clone(),
        pair: format!("{}->{}", spec.teacher.arch, spec.student.arch),
        method: spec.method.as_str().to_string(),
        scale: spec.subset.as_ref().map_or(1.0, |s| s.fraction),
        epoch: last.epoch,
        split: last.split.clone(),
        top1: last.top1,
        top5: last.top5,
        loss_total: last.loss_total,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub runs: PathBuf,
    pub gap_table: PathBuf,
    pub gap_vs_scale: PathBuf,
    pub gaps: GapReport,
}

fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let io = |e: csv::Error| Error::Report(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct GapRow<'a> {
    pair: &'a str,
    scale: f64,
    kd_top1: f64,
    best_other_method: &'a str,
    best_other_top1: f64,
    delta: f64,
}

/// Writes `runs.csv`, `gap_table.csv` and `gap_vs_scale.csv` into `out`.
/// Output depends only on the set of runs, not on their order.
pub fn emit_report(run_dirs: &[PathBuf], out: &Path) -> Result<ReportFiles> {
    let mut runs: Vec<RunSummary> = run_dirs.iter().map(|d| summarize_run(d)).collect::<Result<_>>()?;
    runs.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let files = ReportFiles {
        runs: out.join("runs.csv"),
        gap_table: out.join("gap_table.csv"),
        gap_vs_scale: out.join("gap_vs_scale.csv"),
        gaps: gap_table_partial(&runs.iter().map(RunSummary::as_result).collect::<Vec<_>>()),
    };
    write_csv(
        &files.runs,
        &["run_id", "pair", "method", "scale", "epoch", "split", "top1", "top5", "loss_total"],
        &runs,
    )?;
    let gap_rows: Vec<GapRow> = files
        .gaps
        .entries
        .iter()
        .map(|g| GapRow {
            pair: &g.pair,
            scale: g.scale,
            kd_top1: g.accuracies[super::gap::VANILLA],
            best_other_method: &g.best_other,
            best_other_top1: g.accuracies[&g.best_other],
            delta: g.delta,
        })
        .collect();
    write_csv(
        &files.gap_table,
        &["pair", "scale", "kd_top1", "best_other_method", "best_other_top1", "delta"],
        &gap_rows,
    )?;
    let results: Vec<MethodResult> = runs.iter().map(RunSummary::as_result).collect();
    write_csv(
        &files.gap_vs_scale,
        &["pair", "scale", "method", "top1", "minus_kd"],
        &gap_vs_scale(&results),
    )?;
    Ok(files)
}
