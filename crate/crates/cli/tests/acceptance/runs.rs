//! Criteria that train: determinism, the CIFAR-100 reproduction targets and
//! the ImageNet configuration smoke pass.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use kdbench_core::analysis::{emit_report, load_grid};
use kdbench_core::config::{builtin_recipe, load_job, DistillJobSpec, Method, ModelRef};
use kdbench_core::data::DatasetRef;
use kdbench_train::checkpoint;
use kdbench_train::trainer::RunOutcome;
use kdbench_train::{train_distill, two_stage_distill};

use crate::props::Check;

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn configs() -> PathBuf {
    repo_root().join("configs")
}

fn run(spec: &DistillJobSpec) -> Result<RunOutcome, String> {
    let out = if spec.unlabeled_stage.is_some() { two_stage_distill(spec) } else { train_distill(spec) };
    out.map_err(|e| format!("{}: {e}", spec.name))
}

fn final_params(run_dir: &Path) -> HashMap<String, Vec<u32>> {
    let dir = checkpoint::latest(run_dir).unwrap().expect("a checkpoint");
    checkpoint::load(&dir)
        .unwrap()
        .model
        .into_iter()
        .map(|(k, t)| {
            let v: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
            (k, v.into_iter().map(f32::to_bits).collect())
        })
        .collect()
}

fn tiny(name: &str, runs: &Path) -> DistillJobSpec {
    let mut recipe = builtin_recipe("C").unwrap();
    recipe.batch_size = 8;
    recipe.epochs = 3;
    let mut spec = DistillJobSpec::new(
        name,
        ModelRef::new("resnet20"),
        ModelRef::new("resnet20"),
        Method::Kd,
        DatasetRef::synthetic(4, 8, 32, "train"),
        recipe,
    );
    spec.seed = 11;
    spec.run.runs_dir = runs.to_path_buf();
    spec.run.eval_batch_size = 16;
    spec.run.eval_max_batches = Some(1);
    spec
}

pub fn determinism() -> Check {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let mut spec = tiny("det", dirs[0].path());
    spec.run.max_steps = Some(10);
    let a = run(&spec)?;
    spec.run.runs_dir = dirs[1].path().to_path_buf();
    let b = run(&spec)?;
    if a.step_losses.len() != 10 || a.step_losses != b.step_losses {
        return Err(format!("trajectories differ: {:?} vs {:?}", a.step_losses, b.step_losses));
    }
    spec.run.runs_dir = dirs[2].path().to_path_buf();
    spec.run.max_steps = Some(5);
    let first = run(&spec)?;
    spec.run.max_steps = Some(10);
    let second = run(&spec)?;
    let joined: Vec<f64> = first.step_losses.iter().chain(&second.step_losses).cloned().collect();
    if joined != a.step_losses {
        return Err(format!("5+5 resumed {joined:?} vs straight {:?}", a.step_losses));
    }
    if final_params(&a.run_dir) != final_params(&second.run_dir) {
        return Err("resumed weights differ from the straight run".into());
    }
    Ok("two seeded runs bit-identical; 5+5 resumed equals 10 straight (losses and weights)".into())
}

/// Desk-scale CIFAR-100 targets need the real dataset, trained teachers
/// and GPU-days; they run only when asked for.
pub struct CifarEnv {
    pub root: PathBuf,
    pub runs: PathBuf,
}

impl CifarEnv {
    pub fn from_env() -> Result<Self, String> {
        if std::env::var("KDBENCH_FULL").as_deref() != Ok("1") {
            return Err("not run: set KDBENCH_FULL=1 and CIFAR100_ROOT (GPU-scale training)".into());
        }
        let root = std::env::var("CIFAR100_ROOT").map_err(|_| "not run: CIFAR100_ROOT unset".to_string())?;
        let runs = std::env::var("KDBENCH_RUNS").map_or_else(|_| repo_root().join("runs"), PathBuf::from);
        Ok(Self { root: root.into(), runs })
    }

    fn top1(&self, config: &str) -> Result<f64, String> {
        let mut spec = load_job(&configs().join("cifar100").join(config)).map_err(|e| e.to_string())?;
        spec.dataset.root = self.root.clone();
        if let Some(ckpt) = &spec.teacher.checkpoint {
            if ckpt.is_relative() {
                spec.teacher.checkpoint = Some(repo_root().join(ckpt));
            }
        }
        spec.run.runs_dir = self.runs.clone();
        Ok(run(&spec)?.final_metrics.top1)
    }
}

fn within(v: f64, target: f64) -> bool {
    (v - target).abs() <= 0.7
}

pub fn cifar_previous_recipe(env: &CifarEnv) -> Check {
    let kd = env.top1("res56_res20_prev_kd.toml")?;
    if !within(kd, 70.66) {
        return Err(format!("KD previous recipe top-1 {kd:.2}, target 70.66 +- 0.7"));
    }
    Ok(format!("KD {kd:.2}"))
}

pub fn cifar_stronger_recipe(env: &CifarEnv) -> Check {
    let prev = env.top1("res56_res20_prev_kd.toml")?;
    let short = env.top1("res56_res20_kd_600.toml")?;
    let kd = env.top1("res56_res20_kd.toml")?;
    let dkd = env.top1("res56_res20_dkd.toml")?;
    let dist = env.top1("res56_res20_dist.toml")?;
    let mut errs = Vec::new();
    for (name, v, t) in [("KD", kd, 72.34), ("DKD", dkd, 73.10), ("DIST", dist, 74.51)] {
        if !within(v, t) {
            errs.push(format!("{name} {v:.2} vs {t} +- 0.7"));
        }
    }
    if !(dist > dkd && dkd > kd) {
        errs.push(format!("ordering DIST {dist:.2} > DKD {dkd:.2} > KD {kd:.2} violated"));
    }
    if short <= prev {
        errs.push(format!("600-epoch recipe C KD {short:.2} does not exceed previous recipe {prev:.2}"));
    }
    if errs.is_empty() {
        Ok(format!("KD {kd:.2}, DKD {dkd:.2}, DIST {dist:.2}; 600 ep {short:.2} > prev {prev:.2}"))
    } else {
        Err(errs.join("; "))
    }
}

pub fn cifar_wide_pair(env: &CifarEnv) -> Check {
    let kd = env.top1("res32x4_res8x4_kd.toml")?;
    let best = env.top1("res32x4_res8x4_dkd.toml")?.max(env.top1("res32x4_res8x4_dist.toml")?);
    if !within(kd, 75.90) {
        return Err(format!("KD {kd:.2}, target 75.90 +- 0.7"));
    }
    if kd - best > -1.5 {
        return Err(format!("gap {:.2} smaller than 1.5 points", kd - best));
    }
    Ok(format!("KD {kd:.2}, gap {:.2}", kd - best))
}

fn toml_files(dir: &Path, out: &mut Vec<PathBuf>) {
    let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            toml_files(&p, out);
        } else if p.extension().is_some_and(|e| e == "toml") {
            out.push(p);
        }
    }
}

/// Same job at desk scale: synthetic 32px images over the full label space,
/// random weights, batch 4, 50 optimizer steps.
fn smoke_spec(mut spec: DistillJobSpec, runs: &Path) -> DistillJobSpec {
    let k = spec.dataset.class_count;
    spec.dataset = DatasetRef::synthetic(k, 4, 32, "train");
    spec.eval_split = "val".into();
    if let Some(stage) = spec.unlabeled_stage.as_mut() {
        stage.pool = DatasetRef::synthetic(k, 2, 32, "pool");
        stage.iterations = stage.iterations.min(25);
    }
    spec.recipe.teacher_resolution = 32;
    spec.recipe.student_resolution = 32;
    spec.recipe.batch_size = 4;
    spec.teacher.checkpoint = None;
    spec.student.checkpoint = None;
    spec.run.runs_dir = runs.to_path_buf();
    spec.run.max_steps = Some(50);
    spec.run.eval_batch_size = 8;
    spec.run.eval_max_batches = Some(1);
    spec
}

pub fn imagenet_smoke_and_subset_pipeline() -> Check {
    let mut files = Vec::new();
    toml_files(&configs().join("imagenet"), &mut files);
    let (grids, jobs): (Vec<_>, Vec<_>) = files.into_iter().partition(|p| p.components().any(|c| c.as_os_str() == "grids"));
    let mut cells = 0;
    for g in &grids {
        let grid = load_grid(g).map_err(|e| format!("{}: {e}", g.display()))?;
        cells += grid.cells().map_err(|e| format!("{}: {e}", g.display()))?.len();
    }
    let runs = tempfile::tempdir().unwrap();
    for j in &jobs {
        let spec = load_job(j).map_err(|e| format!("{}: {e}", j.display()))?;
        let started = std::time::Instant::now();
        let out = run(&smoke_spec(spec, runs.path()))?;
        if out.step_losses.len() != 50 || !out.step_losses.iter().all(|l| l.is_finite()) {
            return Err(format!("{}: {} steps, losses {:?}", j.display(), out.step_losses.len(), out.step_losses));
        }
        eprintln!("  smoke {} ok ({:.0?})", j.strip_prefix(configs()).unwrap().display(), started.elapsed());
    }
    let gap = subset_pipeline()?;
    Ok(format!(
        "{} jobs loaded and ran 50 steps, {} grids ({cells} cells) validated; {gap}",
        jobs.len(),
        grids.len()
    ))
}

/// The 30% stratified CIFAR-100 grid end to end on CIFAR-shaped synthetic
/// data (100 classes, 10 images each), reduced to one short epoch.
fn subset_pipeline() -> Result<String, String> {
    let grid = load_grid(&configs().join("cifar100/grids/subset30_methods.toml")).map_err(|e| e.to_string())?;
    let runs = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for cell in grid.cells().map_err(|e| e.to_string())? {
        let mut spec = cell.spec;
        spec.dataset = DatasetRef::synthetic(100, 10, 32, "train");
        spec.teacher.checkpoint = None;
        spec.recipe.batch_size = 32;
        spec.recipe.epochs = 1;
        spec.run.runs_dir = runs.path().to_path_buf();
        spec.run.eval_batch_size = 50;
        spec.run.eval_max_batches = Some(1);
        let out = run(&spec)?;
        let index = std::fs::read_dir(&out.run_dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("subset-"))
            .ok_or_else(|| "no subset index file in the run directory".to_string())?;
        let kept = std::fs::read_to_string(&index).unwrap().lines().filter(|l| !l.trim().is_empty()).count();
        if kept != 300 {
            return Err(format!("subset kept {kept} of 1000 images, expected 300"));
        }
        dirs.push(out.run_dir);
    }
    let report = emit_report(&dirs, &runs.path().join("report")).map_err(|e| e.to_string())?;
    let g = report
        .gaps
        .get("resnet56->resnet20", 0.3)
        .ok_or_else(|| "gap table has no resnet56->resnet20 entry at scale 0.3".to_string())?;
    let text = std::fs::read_to_string(&report.gap_table).map_err(|e| e.to_string())?;
    if text.lines().count() != 2 {
        return Err(format!("gap_table.csv:\n{text}"));
    }
    Ok(format!("30% subset grid produced a gap table (delta {:+.2} vs {})", g.delta, g.best_other))
}
