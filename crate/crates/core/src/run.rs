//! On-disk run artifacts: `runs/<run_id>/{manifest, metrics.jsonl, ckpt-<epoch>/}`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::DistillJobSpec;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub epoch: u32,
    pub split: String,
    pub top1: f64,
    pub top5: f64,
    pub loss_total: f64,
    pub loss_hard: f64,
    pub loss_soft: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub iterations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub spec: DistillJobSpec,
    pub spec_hash: String,
    pub code_version: String,
    pub environment: Vec<(String, String)>,
    pub started_at: String,
    #[serde(default)]
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn total_iterations(&self) -> u64 {
        self.stages.iter().map(|s| s.iterations).sum()
    }

    /// Writes `dir/manifest`; refuses to replace a different existing manifest.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        if let Ok(existing) = fs::read_to_string(&path) {
            if existing == text {
                return Ok(());
            }
            let old: RunManifest = serde_json::from_str(&existing)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            if old.spec_hash != self.spec_hash {
                return Err(Error::Config(format!(
                    "run directory {} belongs to a different spec",
                    dir.display()
                )));
            }
            return Ok(());
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path,
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

pub fn append_metrics(dir: &Path, record: &MetricsRecord) -> Result<()> {
    let path = dir.join(METRICS_FILE);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let line = serde_json::to_string(record).expect("record serializes");
    writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
}

/// Parses a metrics file; blank lines are skipped, malformed lines are
/// reported with their 1-based line number.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&text, path)
}

pub fn parse_metrics(text: &str, path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn checkpoint_dir(run_dir: &Path, epoch: u32) -> PathBuf {
    run_dir.join(format!("ckpt-{epoch}"))
}

/// Checkpoint directories present in a run, sorted by epoch.
pub fn list_checkpoints(run_dir: &Path) -> Result<Vec<(u32, PathBuf)>> {
    let mut out = Vec::new();
    let entries = match fs::read_dir(run_dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(Error::io(run_dir, e)),
    };
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(run_dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(epoch) = name.strip_prefix("ckpt-").and_then(|s| s.parse().ok()) {
            out.push((epoch, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: u32) -> MetricsRecord {
        MetricsRecord {
            run_id: "r".into(),
            epoch,
            split: "val".into(),
            top1: 50.0,
            top5: 80.0,
            loss_total: 1.0,
            loss_hard: 0.5,
            loss_soft: 0.5,
            lr: 0.1,
            wall_time_s: 2.0,
        }
    }

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        append_metrics(dir.path(), &rec(1)).unwrap();
        append_metrics(dir.path(), &rec(2)).unwrap();
        let back = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(back, vec![rec(1), rec(2)]);
    }

    #[test]
    fn malformed_line_number() {
        let text = format!("{}\n{{oops\n", serde_json::to_string(&rec(1)).unwrap());
        match parse_metrics(&text, Path::new("m.jsonl")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
