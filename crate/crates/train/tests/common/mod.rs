#![allow(dead_code)]

use std::path::Path;

use kdbench_core::config::{builtin_recipe, DistillJobSpec, Method, ModelRef};
use kdbench_core::data::DatasetRef;

/// Four classes of eight synthetic 32px images; batch 8 gives four steps
/// per epoch.
pub fn tiny_spec(name: &str, method: Method, runs: &Path) -> DistillJobSpec {
    let mut recipe = builtin_recipe("C").unwrap();
    recipe.batch_size = 8;
    recipe.epochs = 2;
    let mut spec = DistillJobSpec::new(
        name,
        ModelRef::new("resnet20"),
        ModelRef::new("resnet20"),
        method,
        DatasetRef::synthetic(4, 8, 32, "train"),
        recipe,
    );
    spec.seed = 7;
    spec.run.runs_dir = runs.to_path_buf();
    spec.run.eval_batch_size = 16;
    spec.run.eval_max_batches = Some(1);
    spec
}
