//! Drivers that need live models: CKA heatmaps over a probe set and the
//! sequential grid runner.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::Device;
use kdbench_core::analysis::{grid_csv, CellOutcome, CkaGrid, CkaMatrix, GridCell, GridSpec};
use kdbench_core::data::Loader;
use kdbench_core::{Error, Result};
use ndarray::Array2;

use crate::models::Model;
use crate::nn::Ctx;
use crate::tensor::{images_to_tensor, tensor_to_arrayd};
use crate::trainer::train_distill;

/// Default probe size in images.
pub const PROBE_IMAGES: usize = 2048;

fn flatten(map: &BTreeMap<String, Array2<f64>>, id: &str) -> Option<Array2<f64>> {
    map.get(id).cloned()
}

fn activations(model: &Model, x: &candle_core::Tensor, layers: &[String]) -> Result<BTreeMap<String, Array2<f64>>> {
    let fwd = model.forward(x, &Ctx::eval())?;
    let mut out = BTreeMap::new();
    for id in layers {
        let t = tensor_to_arrayd(fwd.tap(id)?)?;
        let n = t.shape()[0];
        let d = t.len() / n.max(1);
        let flat = t
            .into_shape_with_order((n, d))
            .map_err(|e| Error::Shape(format!("tap {id}: {e}")))?;
        out.insert(id.clone(), flat);
    }
    Ok(out)
}

/// Linear CKA between every (layer of `a`, layer of `b`) pair, accumulated
/// over the probe loader in eval mode. `max_images` caps the probe.
pub fn cka_heatmap(
    a: &Model,
    b: &Model,
    probe: &Loader,
    layers_a: &[String],
    layers_b: &[String],
    max_images: usize,
) -> Result<CkaMatrix> {
    let mut grid = CkaGrid::new(layers_a.to_vec(), layers_b.to_vec());
    let plan = probe.epoch_plan(0);
    let mut seen = 0;
    for step in 0..plan.len() {
        if seen >= max_images {
            break;
        }
        let batch = probe.batch_from_plan(&plan, 0, step)?;
        if batch.targets.len() < 2 {
            break;
        }
        let x = images_to_tensor(&batch.images, &Device::Cpu)?;
        let fa = activations(a, &x, layers_a)?;
        let fb = activations(b, &x, layers_b)?;
        grid.add(&|id| flatten(&fa, id), &|id| flatten(&fb, id))?;
        seen += batch.targets.len();
    }
    grid.finish()
}

#[derive(Debug, Clone)]
pub struct GridRun {
    pub results: Vec<(GridCell, CellOutcome)>,
    pub csv_path: PathBuf,
}

/// Runs every cell in row-major order. A cell whose run directory already
/// holds a finished checkpoint is picked up without retraining; failures
/// are recorded and the grid moves on.
pub fn grid_run(grid: &GridSpec, out_dir: &Path) -> Result<GridRun> {
    let mut results = Vec::new();
    for cell in grid.cells()? {
        let run_id = cell.spec.run_id();
        let outcome = match train_distill(&cell.spec) {
            Ok(o) => CellOutcome::Done {
                run_id,
                metrics: o.final_metrics,
            },
            Err(e) => CellOutcome::Failed {
                run_id,
                error: e.to_string(),
            },
        };
        results.push((cell, outcome));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join("grid.csv");
    let text = grid_csv(grid, &results)?;
    std::fs::write(&csv_path, text).map_err(|e| Error::io(&csv_path, e))?;
    Ok(GridRun { results, csv_path })
}
