//! Checkpoint directories: `model.safetensors` (student parameters and
//! buffers, loadable on its own), `state.safetensors` (optimizer moments,
//! EMA shadow, projector parameters) and `meta.json`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use kdbench_core::run::list_checkpoints;
use kdbench_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::amp::LossScaler;
use crate::schedule::ScheduleState;

pub const MODEL_FILE: &str = "model.safetensors";
pub const STATE_FILE: &str = "state.safetensors";
pub const META_FILE: &str = "meta.json";
pub const POOL_CHECKPOINT: &str = "ckpt-pool";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pool,
    Main,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub run_id: String,
    pub spec_hash: String,
    pub stage: Stage,
    /// Completed epochs of the main stage.
    pub epoch: u32,
    /// Steps already taken inside epoch `epoch` (0 at epoch boundaries).
    pub step_in_epoch: u64,
    /// Completed stage-one iterations.
    pub pool_iterations: u64,
    pub optimizer_steps: u64,
    pub schedule: ScheduleState,
    pub scaler: LossScaler,
    pub best_top1: Option<f64>,
    pub best_epoch: Option<u32>,
    pub wall_time_s: f64,
    pub finished: bool,
}

pub struct Checkpoint {
    pub dir: PathBuf,
    pub meta: CheckpointMeta,
    pub model: HashMap<String, Tensor>,
    pub state: HashMap<String, Tensor>,
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Writes into a sibling temporary directory and renames it into place so
/// an interrupted save never leaves a partial checkpoint.
pub fn save(
    dir: &Path,
    meta: &CheckpointMeta,
    model: &HashMap<String, Tensor>,
    state: &HashMap<String, Tensor>,
) -> Result<()> {
    let parent = dir.parent().ok_or_else(|| data_err(dir, "no parent directory"))?;
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("ckpt");
    let tmp = parent.join(format!(".{name}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    candle_core::safetensors::save(model, tmp.join(MODEL_FILE)).map_err(|e| data_err(&tmp, e))?;
    candle_core::safetensors::save(state, tmp.join(STATE_FILE)).map_err(|e| data_err(&tmp, e))?;
    let text = serde_json::to_string_pretty(meta).expect("meta serializes");
    fs::write(tmp.join(META_FILE), text).map_err(|e| Error::io(tmp.join(META_FILE), e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path,
        line: e.line(),
        msg: e.to_string(),
    })
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let meta = read_meta(dir)?;
    let read = |file: &str| {
        let p = dir.join(file);
        candle_core::safetensors::load(&p, &Device::Cpu).map_err(|e| data_err(&p, e))
    };
    Ok(Checkpoint {
        dir: dir.to_path_buf(),
        meta,
        model: read(MODEL_FILE)?,
        state: read(STATE_FILE)?,
    })
}

/// Most advanced checkpoint of a run: the latest main-stage one, else the
/// stage-one checkpoint, else none.
pub fn latest(run_dir: &Path) -> Result<Option<PathBuf>> {
    let mut best: Option<(u32, u64, PathBuf)> = None;
    for (_, dir) in list_checkpoints(run_dir)? {
        let m = read_meta(&dir)?;
        let key = (m.epoch, m.step_in_epoch);
        if best.as_ref().is_none_or(|(e, s, _)| key > (*e, *s)) {
            best = Some((key.0, key.1, dir));
        }
    }
    if let Some((_, _, dir)) = best {
        return Ok(Some(dir));
    }
    let pool = run_dir.join(POOL_CHECKPOINT);
    Ok(pool.join(META_FILE).exists().then_some(pool))
}

/// Removes epoch checkpoints other than `keep`.
pub fn prune(run_dir: &Path, keep: &[u32]) -> Result<()> {
    for (epoch, dir) in list_checkpoints(run_dir)? {
        if !keep.contains(&epoch) {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }
    Ok(())
}
