//! Distillation runs: setup, the optional soft-label stage on an unlabeled
//! pool, the main labeled stage, evaluation, checkpointing and resume.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime};

use candle_core::{Device, Tensor};
use kdbench_core::config::{DistillJobSpec, TrainingRecipe};
use kdbench_core::data::{
    apply_mixing, build_augmentation, stream_rng, stream_seed, subset_dataset, DatasetRef, Loader, UnlabeledPool,
};
use kdbench_core::losses::{ce_loss, HardTargetBatch, LogitsBatch, LossBreakdown};
use kdbench_core::run::{append_metrics, checkpoint_dir, read_metrics, MetricsRecord, RunManifest, StageRecord, METRICS_FILE};
use kdbench_core::{Error, Result};
use ndarray::Array4;
use serde_json::json;

use crate::amp::LossScaler;
use crate::checkpoint::{self, CheckpointMeta, Stage, POOL_CHECKPOINT};
use crate::ema::Ema;
use crate::models::{build_model, Model};
use crate::nn::Ctx;
use crate::objective::{argmax_rows, Objective};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::Param;
use crate::schedule::ScheduleState;
use crate::tensor::{images_to_tensor, tensor_to_array2, BackendExt};

// Stream identifiers for keyed randomness.
const TEACHER_INIT: u64 = 0x7E_AC;
const STUDENT_INIT: u64 = 0x57_0D;
const AUX_INIT: u64 = 0xA0_C5;
const MIX: u64 = 0x31_C5;
const DROP: u64 = 0xD2_0B;
const POOL: u64 = 0x90_01;

pub const ABORT_FILE: &str = "abort.json";

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    pub final_metrics: MetricsRecord,
    /// False when the run stopped at `run.max_steps` before its budget.
    pub completed: bool,
    /// Loss totals of the steps executed by this call, in order.
    pub step_losses: Vec<f64>,
    /// Teacher parameter and buffer digest at session start and at return.
    pub teacher_fingerprint: (u64, u64),
}

/// Order-sensitive digest of every tensor's name and bit pattern.
pub fn fingerprint(model: &Model) -> Result<u64> {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for (name, t) in model.store.tensors() {
        name.hash(&mut h);
        let v: Vec<f32> = t.to_dtype(candle_core::DType::F32).be()?.flatten_all().be()?.to_vec1().be()?;
        v.iter().for_each(|x| x.to_bits().hash(&mut h));
    }
    Ok(h.finish())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    /// Percentages.
    pub top1: f64,
    pub top5: f64,
    /// Mean cross-entropy.
    pub loss: f64,
    pub samples: usize,
}

/// Top-1/top-5 and cross-entropy over `loader` in eval mode. Predictions
/// break ties toward the lower class index.
pub fn evaluate(model: &Model, loader: &Loader, max_batches: Option<usize>) -> Result<EvalResult> {
    let plan = loader.epoch_plan(0);
    let batches = max_batches.map_or(plan.len(), |m| m.min(plan.len()));
    let (mut c1, mut c5, mut loss_sum, mut n) = (0usize, 0usize, 0.0, 0usize);
    for step in 0..batches {
        let batch = loader.batch_from_plan(&plan, 0, step)?;
        let x = images_to_tensor(&batch.images, &Device::Cpu)?;
        let logits = tensor_to_array2(&model.forward(&x, &Ctx::eval())?.logits)?;
        let lb = LogitsBatch::new(logits)?;
        loss_sum += ce_loss(&lb, &HardTargetBatch::Indices(batch.targets.clone()), 0.0)? * batch.targets.len() as f64;
        for (row, &y) in lb.values().rows().into_iter().zip(&batch.targets) {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            c1 += usize::from(order[0] == y);
            c5 += usize::from(order.iter().take(5).any(|&k| k == y));
        }
        n += batch.targets.len();
    }
    if n == 0 {
        return Err(Error::Data("evaluation produced no samples".into()));
    }
    Ok(EvalResult {
        top1: 100.0 * c1 as f64 / n as f64,
        top5: 100.0 * c5 as f64 / n as f64,
        loss: loss_sum / n as f64,
        samples: n,
    })
}

pub fn eval_loader(dataset: &DatasetRef, recipe: &TrainingRecipe, batch_size: usize, workers: usize) -> Result<Loader> {
    let ds: Arc<dyn kdbench_core::data::Dataset> = Arc::from(dataset.open()?);
    Loader::eval(ds, build_augmentation(recipe, dataset, false), batch_size, workers)
}

/// Standard distillation; runs the soft-label stage first when the job
/// configures one. Resumes from the run directory's latest checkpoint.
pub fn train_distill(spec: &DistillJobSpec) -> Result<RunOutcome> {
    Session::open(spec)?.run()
}

/// Two-stage distillation; the job must configure an unlabeled pool.
pub fn two_stage_distill(spec: &DistillJobSpec) -> Result<RunOutcome> {
    if spec.unlabeled_stage.is_none() {
        return Err(Error::Data("two-stage distillation needs `unlabeled_stage.pool`".into()));
    }
    train_distill(spec)
}

struct EpochStats {
    steps: usize,
    total: f64,
    hard: f64,
    soft: f64,
    correct: usize,
    seen: usize,
}

impl EpochStats {
    fn new() -> Self {
        Self {
            steps: 0,
            total: 0.0,
            hard: 0.0,
            soft: 0.0,
            correct: 0,
            seen: 0,
        }
    }

    fn add(&mut self, b: &LossBreakdown, preds: &[usize], targets: Option<&[usize]>) {
        self.steps += 1;
        self.total += b.total;
        self.hard += b.hard_component;
        self.soft += b.soft_component;
        if let Some(t) = targets {
            self.correct += preds.iter().zip(t).filter(|(p, y)| p == y).count();
            self.seen += t.len();
        }
    }

    fn mean(&self, v: f64) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            v / self.steps as f64
        }
    }
}

struct Session {
    spec: DistillJobSpec,
    run_id: String,
    run_dir: PathBuf,
    manifest: RunManifest,
    teacher: Model,
    student: Model,
    objective: Objective,
    train: Loader,
    eval: Loader,
    pool: Option<(UnlabeledPool, u64)>,
    resume: Option<checkpoint::Checkpoint>,
    clock: Instant,
    wall_offset: f64,
    step_losses: Vec<f64>,
    teacher_digest: u64,
}

fn environment() -> Vec<(String, String)> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    vec![
        ("os".into(), std::env::consts::OS.into()),
        ("arch".into(), std::env::consts::ARCH.into()),
        ("threads".into(), threads.to_string()),
        ("device".into(), "cpu".into()),
    ]
}

fn load_weights(model: &Model, path: &Option<PathBuf>) -> Result<()> {
    if let Some(p) = path {
        model.store.load_file(p)?;
    }
    Ok(())
}

impl Session {
    fn open(spec: &DistillJobSpec) -> Result<Self> {
        // Zero epochs is accepted here as an evaluation-only request.
        let eval_only = spec.recipe.epochs == 0 && spec.recipe.warmup_epochs == 0;
        let violations: Vec<_> = spec
            .validate()
            .into_iter()
            .filter(|v| !(eval_only && matches!(v.field.as_str(), "recipe.epochs" | "recipe.warmup_epochs")))
            .collect();
        if !violations.is_empty() {
            let text: Vec<String> = violations.iter().map(|v| format!("{}: {}", v.field, v.rule)).collect();
            return Err(Error::Config(text.join("; ")));
        }
        let run_id = spec.run_id();
        let run_dir = spec.run.runs_dir.join(&run_id);
        fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        let recipe = &spec.recipe;

        let train_ref = match &spec.subset {
            Some(s) => subset_dataset(&spec.dataset, s, &run_dir)?,
            None => spec.dataset.clone(),
        };
        let train_ds: Arc<dyn kdbench_core::data::Dataset> = Arc::from(train_ref.open()?);
        let classes = spec.dataset.class_count;
        if train_ds.class_count() != classes {
            return Err(Error::Data(format!(
                "dataset reports {} classes, spec declares {classes}",
                train_ds.class_count()
            )));
        }
        let train = Loader::train(
            train_ds,
            build_augmentation(recipe, &train_ref, true),
            recipe.batch_size,
            recipe.repeated_aug_count,
            spec.seed,
            spec.run.workers,
        )?;
        let eval_ref = spec.dataset.with_split(&spec.eval_split);
        let eval = eval_loader(&eval_ref, recipe, spec.run.eval_batch_size, spec.run.workers)?;
        let pool = match &spec.unlabeled_stage {
            Some(stage) if stage.iterations > 0 => {
                let ds: Arc<dyn kdbench_core::data::Dataset> = Arc::from(stage.pool.open()?);
                let p = UnlabeledPool::new(
                    ds,
                    build_augmentation(recipe, &stage.pool, true),
                    recipe.batch_size,
                    stream_seed(&[spec.seed, POOL]),
                    spec.run.workers,
                )?;
                Some((p, stage.iterations))
            }
            _ => None,
        };

        let res = recipe.student_resolution;
        let teacher = build_model(&spec.teacher.arch, classes, res, 0.0, stream_seed(&[spec.seed, TEACHER_INIT]))?;
        load_weights(&teacher, &spec.teacher.checkpoint)?;
        let teacher_digest = fingerprint(&teacher)?;
        let student = build_model(
            &spec.student.arch,
            classes,
            res,
            recipe.drop_path_rate,
            stream_seed(&[spec.seed, STUDENT_INIT]),
        )?;
        load_weights(&student, &spec.student.checkpoint)?;
        let probe = Tensor::zeros((2, 3, res as usize, res as usize), candle_core::DType::F32, &Device::Cpu).be()?;
        let objective = Objective::new(
            spec,
            &student.forward(&probe, &Ctx::eval())?,
            &teacher.forward(&probe, &Ctx::eval())?,
            stream_seed(&[spec.seed, AUX_INIT]),
        )?;

        let mut stages = Vec::new();
        if let Some((_, iters)) = &pool {
            stages.push(StageRecord {
                name: "unlabeled".into(),
                iterations: *iters,
            });
        }
        stages.push(StageRecord {
            name: "labeled".into(),
            iterations: u64::from(recipe.epochs) * train.steps_per_epoch() as u64,
        });
        let manifest = RunManifest {
            run_id: run_id.clone(),
            spec: spec.clone(),
            spec_hash: spec.identity_hash(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            environment: environment(),
            started_at: humantime::format_rfc3339_seconds(SystemTime::now()).to_string(),
            stages,
        };
        manifest.write(&run_dir)?;
        let manifest = RunManifest::read(&run_dir)?;

        let resume = match checkpoint::latest(&run_dir)? {
            Some(dir) => {
                let ck = checkpoint::load(&dir)?;
                if ck.meta.spec_hash != manifest.spec_hash {
                    return Err(Error::Config(format!("checkpoint {} belongs to a different spec", dir.display())));
                }
                Some(ck)
            }
            None => None,
        };
        let wall_offset = resume.as_ref().map_or(0.0, |c| c.meta.wall_time_s);
        Ok(Self {
            spec: spec.clone(),
            run_id,
            run_dir,
            manifest,
            teacher,
            student,
            objective,
            train,
            eval,
            pool,
            resume,
            clock: Instant::now(),
            wall_offset,
            step_losses: Vec::new(),
            teacher_digest,
        })
    }

    fn params(&self) -> Vec<Param> {
        let mut p = self.student.store.params.clone();
        p.extend(self.objective.store.params.iter().cloned());
        p
    }

    fn wall(&self) -> f64 {
        self.wall_offset + self.clock.elapsed().as_secs_f64()
    }

    fn steps_per_epoch(&self) -> u64 {
        self.train.steps_per_epoch() as u64
    }

    fn main_schedule(&self) -> ScheduleState {
        let spe = self.steps_per_epoch();
        let r = &self.spec.recipe;
        ScheduleState::new(u64::from(r.epochs) * spe, u64::from(r.warmup_epochs) * spe, r.base_lr)
    }

    fn new_optimizer(&self) -> Optimizer {
        Optimizer::new(OptimizerConfig::from_recipe(&self.spec.recipe), self.params())
    }

    fn new_ema(&self) -> Result<Option<Ema>> {
        if !self.spec.recipe.ema {
            return Ok(None);
        }
        let ts: Vec<Tensor> = self.student.store.params.iter().map(|p| p.var.as_tensor().clone()).collect();
        Ema::new(&ts, self.spec.recipe.ema_decay).map(Some)
    }

    fn restore(&self, ck: &checkpoint::Checkpoint, opt: &mut Optimizer, ema: &mut Option<Ema>) -> Result<()> {
        self.student.store.load(&ck.model, "")?;
        self.objective.store.load(&ck.state, "aux.")?;
        opt.load_state(&ck.state, ck.meta.optimizer_steps);
        if let Some(e) = ema {
            for (s, p) in e.shadow.iter_mut().zip(&self.student.store.params) {
                if let Some(t) = ck.state.get(&format!("ema.{}", p.name)) {
                    *s = t.clone();
                }
            }
        }
        Ok(())
    }

    fn save(&self, dir: &Path, meta: &CheckpointMeta, opt: &Optimizer, ema: &Option<Ema>) -> Result<()> {
        let model: HashMap<String, Tensor> = self.student.store.tensors().into_iter().collect();
        let mut state: HashMap<String, Tensor> = opt.state_tensors().into_iter().collect();
        for (n, t) in self.objective.store.tensors() {
            state.insert(format!("aux.{n}"), t);
        }
        if let Some(e) = ema {
            for (s, p) in e.shadow.iter().zip(&self.student.store.params) {
                state.insert(format!("ema.{}", p.name), s.clone());
            }
        }
        checkpoint::save(dir, meta, &model, &state)
    }

    fn record(&self, epoch: u32, split: &str, top1: f64, top5: f64, loss: (f64, f64, f64), lr: f64) -> Result<MetricsRecord> {
        let rec = MetricsRecord {
            run_id: self.run_id.clone(),
            epoch,
            split: split.to_string(),
            top1,
            top5,
            loss_total: loss.0,
            loss_hard: loss.1,
            loss_soft: loss.2,
            lr,
            wall_time_s: self.wall(),
        };
        append_metrics(&self.run_dir, &rec)?;
        Ok(rec)
    }

    /// Evaluates the live student (and the EMA shadow when enabled) and
    /// appends the records; returns the live-model record.
    fn evaluate_and_record(&self, epoch: u32, lr: f64, ema: &Option<Ema>) -> Result<MetricsRecord> {
        let max = self.spec.run.eval_max_batches;
        let r = evaluate(&self.student, &self.eval, max)?;
        let rec = self.record(epoch, &self.spec.eval_split, r.top1, r.top5, (r.loss, r.loss, 0.0), lr)?;
        if let Some(e) = ema {
            let live: Vec<Tensor> = self.student.store.params.iter().map(|p| p.var.as_tensor().copy()).collect::<candle_core::Result<_>>().be()?;
            for (p, s) in self.student.store.params.iter().zip(&e.shadow) {
                p.var.set(s).be()?;
            }
            let r = evaluate(&self.student, &self.eval, max);
            for (p, t) in self.student.store.params.iter().zip(&live) {
                p.var.set(t).be()?;
            }
            let r = r?;
            self.record(epoch, &format!("{}-ema", self.spec.eval_split), r.top1, r.top5, (r.loss, r.loss, 0.0), lr)?;
        }
        Ok(rec)
    }

    fn abort(&self, stage: Stage, epoch: u32, step: u64, lr: f64, b: &LossBreakdown, images: &Array4<f32>) -> Error {
        let n = images.len() as f64;
        let mean = images.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = images.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
        let fmt = |v: f64| if v.is_finite() { json!(v) } else { json!(v.to_string()) };
        let terms: Vec<_> = b.terms.iter().map(|(k, w, v)| json!({"name": k, "weight": w, "value": fmt(*v)})).collect();
        let diag = json!({
            "run_id": self.run_id,
            "stage": stage,
            "epoch": epoch,
            "step": step,
            "lr": lr,
            "loss_total": fmt(b.total),
            "terms": terms,
            "batch": {
                "size": images.dim().0,
                "mean": fmt(mean),
                "std": fmt(var.sqrt()),
                "min": fmt(images.iter().fold(f64::INFINITY, |m, &v| m.min(f64::from(v)))),
                "max": fmt(images.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)))),
            }
        });
        let path = self.run_dir.join(ABORT_FILE);
        let _ = fs::write(&path, serde_json::to_string_pretty(&diag).expect("json"));
        Error::Numeric(format!(
            "non-finite loss at epoch {epoch} step {step} (lr {lr:.3e}); diagnostics in {}",
            path.display()
        ))
    }

    /// Forward, loss, backward and (unless the scaler skips it) one update.
    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        opt: &mut Optimizer,
        ema: &mut Option<Ema>,
        scaler: &mut LossScaler,
        images: &Array4<f32>,
        targets: Option<&HardTargetBatch>,
        lr: f64,
        drop_seed: u64,
        at: (Stage, u32, u64),
    ) -> Result<(LossBreakdown, Vec<usize>)> {
        let x = images_to_tensor(images, &Device::Cpu)?;
        let t_fwd = self.teacher.forward(&x, &Ctx::eval())?;
        let s_fwd = self.student.forward(&x, &Ctx::train(self.spec.recipe.amp, drop_seed))?;
        let loss = self.objective.compute(&s_fwd, &t_fwd, targets)?;
        if !loss.breakdown.total.is_finite() {
            return Err(self.abort(at.0, at.1, at.2, lr, &loss.breakdown, images));
        }
        let preds = argmax_rows(&tensor_to_array2(&s_fwd.logits)?);
        let grads = (loss.surrogate * scaler.scale).be()?.backward().be()?;
        let mut collected = Vec::with_capacity(opt.params.len());
        let mut finite = true;
        for p in &opt.params {
            let g = match grads.get(p.var.as_tensor()) {
                Some(g) => {
                    // Detached so optimizer state never holds on to this step's graph.
                    let g = (g.detach() / scaler.scale).be()?;
                    finite &= crate::tensor::all_finite(&g)?;
                    Some(g)
                }
                None => None,
            };
            collected.push(g);
        }
        if scaler.update(finite) {
            opt.step(&collected, lr)?;
            if let Some(e) = ema {
                let ts: Vec<Tensor> = self.student.store.params.iter().map(|p| p.var.as_tensor().clone()).collect();
                e.update(&ts)?;
            }
        } else if !self.spec.recipe.amp {
            return Err(self.abort(at.0, at.1, at.2, lr, &loss.breakdown, images));
        }
        self.step_losses.push(loss.breakdown.total);
        Ok((loss.breakdown, preds))
    }

    fn meta(&self, stage: Stage, epoch: u32, step: u64, pool_it: u64, opt: &Optimizer, sched: ScheduleState, scaler: LossScaler, best: (Option<f64>, Option<u32>), finished: bool) -> CheckpointMeta {
        CheckpointMeta {
            run_id: self.run_id.clone(),
            spec_hash: self.manifest.spec_hash.clone(),
            stage,
            epoch,
            step_in_epoch: step,
            pool_iterations: pool_it,
            optimizer_steps: opt.steps,
            schedule: sched,
            scaler,
            best_top1: best.0,
            best_epoch: best.1,
            wall_time_s: self.wall(),
            finished,
        }
    }

    fn outcome(&self, final_metrics: MetricsRecord, completed: bool) -> Result<RunOutcome> {
        Ok(RunOutcome {
            run_dir: self.run_dir.clone(),
            manifest: self.manifest.clone(),
            final_metrics,
            completed,
            step_losses: self.step_losses.clone(),
            teacher_fingerprint: (self.teacher_digest, fingerprint(&self.teacher)?),
        })
    }

    fn last_eval_record(&self) -> Result<MetricsRecord> {
        let recs = read_metrics(&self.run_dir.join(METRICS_FILE))?;
        recs.into_iter()
            .rev()
            .find(|r| r.split == self.spec.eval_split)
            .ok_or_else(|| Error::Data(format!("run {} finished without evaluation records", self.run_id)))
    }

    fn run(mut self) -> Result<RunOutcome> {
        let resume = self.resume.take();
        if let Some(ck) = &resume {
            if ck.meta.finished {
                self.student.store.load(&ck.model, "")?;
                let rec = self.last_eval_record()?;
                return self.outcome(rec, true);
            }
        }
        let max_steps = self.spec.run.max_steps;
        let mut done: u64 = 0;
        let mut main_resume = None;
        if let Some(ck) = resume {
            done = ck.meta.pool_iterations + u64::from(ck.meta.epoch) * self.steps_per_epoch() + ck.meta.step_in_epoch;
            match ck.meta.stage {
                Stage::Pool => {
                    if let Some(rec) = self.pool_stage(Some(&ck), &mut done, max_steps)? {
                        return self.outcome(rec, false);
                    }
                }
                Stage::Main => main_resume = Some(ck),
            }
        } else if self.pool.is_some() {
            if let Some(rec) = self.pool_stage(None, &mut done, max_steps)? {
                return self.outcome(rec, false);
            }
        }
        self.main_stage(main_resume.as_ref(), &mut done, max_steps)
    }

    /// Returns a record when the step cap interrupted the stage.
    fn pool_stage(&mut self, ck: Option<&checkpoint::Checkpoint>, done: &mut u64, max_steps: Option<u64>) -> Result<Option<MetricsRecord>> {
        let Some((_, iters)) = &self.pool else {
            return Ok(None);
        };
        let iters = *iters;
        let warmup = u64::from(self.spec.recipe.warmup_epochs) * self.steps_per_epoch();
        let mut sched = ScheduleState::new(iters, warmup, self.spec.recipe.base_lr);
        let mut opt = self.new_optimizer();
        let mut ema = self.new_ema()?;
        let mut scaler = LossScaler::new(self.spec.recipe.amp);
        let mut start = 0;
        if let Some(ck) = ck {
            self.restore(ck, &mut opt, &mut ema)?;
            scaler = ck.meta.scaler;
            start = ck.meta.pool_iterations;
        }
        let dir = self.run_dir.join(POOL_CHECKPOINT);
        let mut stats = EpochStats::new();
        for it in start..iters {
            if max_steps.is_some_and(|m| *done >= m) {
                let meta = self.meta(Stage::Pool, 0, 0, it, &opt, sched, scaler, (None, None), false);
                self.save(&dir, &meta, &opt, &ema)?;
                return self.evaluate_and_record(0, sched.current_lr, &ema).map(Some);
            }
            let images = self.pool.as_ref().expect("pool").0.batch(it)?;
            let lr = sched.seek(it);
            let drop = stream_seed(&[self.spec.seed, POOL, it, DROP]);
            let (b, preds) = self.step(&mut opt, &mut ema, &mut scaler, &images, None, lr, drop, (Stage::Pool, 0, it))?;
            stats.add(&b, &preds, None);
            *done += 1;
        }
        self.record(0, "unlabeled", 0.0, 0.0, (stats.mean(stats.total), 0.0, stats.mean(stats.soft)), sched.current_lr)?;
        let meta = self.meta(Stage::Pool, 0, 0, iters, &opt, sched, scaler, (None, None), false);
        self.save(&dir, &meta, &opt, &ema)?;
        Ok(None)
    }

    fn main_stage(&mut self, ck: Option<&checkpoint::Checkpoint>, done: &mut u64, max_steps: Option<u64>) -> Result<RunOutcome> {
        let spe = self.steps_per_epoch();
        let epochs = self.spec.recipe.epochs;
        let mut sched = self.main_schedule();
        let mut opt = self.new_optimizer();
        let mut ema = self.new_ema()?;
        let mut scaler = LossScaler::new(self.spec.recipe.amp);
        let (mut start_epoch, mut start_step) = (0u32, 0u64);
        let mut best: (Option<f64>, Option<u32>) = (None, None);
        let pool_its = self.pool.as_ref().map_or(0, |p| p.1);
        if let Some(ck) = ck {
            self.restore(ck, &mut opt, &mut ema)?;
            scaler = ck.meta.scaler;
            start_epoch = ck.meta.epoch;
            start_step = ck.meta.step_in_epoch;
            best = (ck.meta.best_top1, ck.meta.best_epoch);
        } else if pool_its > 0 {
            // Carry the stage-one student into the labeled stage.
            let pool = checkpoint::load(&self.run_dir.join(POOL_CHECKPOINT))?;
            self.student.store.load(&pool.model, "")?;
            self.objective.store.load(&pool.state, "aux.")?;
        }
        if epochs == 0 {
            let rec = self.evaluate_and_record(0, 0.0, &ema)?;
            let meta = self.meta(Stage::Main, 0, 0, pool_its, &opt, sched, scaler, (Some(rec.top1), Some(0)), true);
            self.save(&checkpoint_dir(&self.run_dir, 0), &meta, &opt, &ema)?;
            return self.outcome(rec, true);
        }
        let classes = self.spec.dataset.class_count;
        let r = self.spec.recipe.clone();
        let mut last_rec = None;
        for epoch in start_epoch..epochs {
            let plan = self.train.epoch_plan(u64::from(epoch));
            let mut stats = EpochStats::new();
            let first = if epoch == start_epoch { start_step } else { 0 };
            for step in first..spe {
                if max_steps.is_some_and(|m| *done >= m) {
                    let meta = self.meta(Stage::Main, epoch, step, pool_its, &opt, sched, scaler, best, false);
                    self.save(&checkpoint_dir(&self.run_dir, epoch), &meta, &opt, &ema)?;
                    let rec = self.evaluate_and_record(epoch, sched.current_lr, &ema)?;
                    return self.outcome(rec, false);
                }
                let batch = self.train.batch_from_plan(&plan, u64::from(epoch), step as usize)?;
                let mut rng = stream_rng(&[self.spec.seed, u64::from(epoch), step, MIX]);
                let mixed = apply_mixing(
                    &batch.images,
                    &HardTargetBatch::Indices(batch.targets.clone()),
                    classes,
                    r.mixup_alpha,
                    r.cutmix_alpha,
                    &mut rng,
                )?;
                let global = u64::from(epoch) * spe + step;
                let lr = sched.seek(global);
                let drop = stream_seed(&[self.spec.seed, u64::from(epoch), step, DROP]);
                let (b, preds) = self.step(
                    &mut opt,
                    &mut ema,
                    &mut scaler,
                    &mixed.images,
                    Some(&mixed.targets),
                    lr,
                    drop,
                    (Stage::Main, epoch, step),
                )?;
                stats.add(&b, &preds, Some(&mixed.targets.dominant_indices()));
                *done += 1;
            }
            let completed = epoch + 1;
            let train_top1 = if stats.seen == 0 { 0.0 } else { 100.0 * stats.correct as f64 / stats.seen as f64 };
            let losses = (stats.mean(stats.total), stats.mean(stats.hard), stats.mean(stats.soft));
            self.record(completed, "train", train_top1, 0.0, losses, sched.current_lr)?;
            let rec = self.evaluate_and_record(completed, sched.current_lr, &ema)?;
            if best.0.is_none_or(|b| rec.top1 > b) {
                best = (Some(rec.top1), Some(completed));
            }
            let finished = completed == epochs;
            if finished || completed % self.spec.run.checkpoint_every == 0 {
                let meta = self.meta(Stage::Main, completed, 0, pool_its, &opt, sched, scaler, best, finished);
                self.save(&checkpoint_dir(&self.run_dir, completed), &meta, &opt, &ema)?;
                let keep: Vec<u32> = [Some(completed), best.1].into_iter().flatten().collect();
                checkpoint::prune(&self.run_dir, &keep)?;
            }
            last_rec = Some(rec);
        }
        let rec = match last_rec {
            Some(r) => r,
            None => self.last_eval_record()?,
        };
        self.outcome(rec, true)
    }
}
