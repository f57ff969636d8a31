//! `kdbench`: run distillation jobs, evaluate checkpoints, compute CKA
//! heatmaps, sweep grids and summarize runs.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric abort.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kdbench_core::analysis::{emit_report, load_grid, CellOutcome};
use kdbench_core::config::{builtin_recipe, job_to_toml, load_job, merge_overrides, parse_override, BUILTIN_RECIPES};
use kdbench_core::data::Loader;
use kdbench_core::run::{RunManifest, MANIFEST_FILE};
use kdbench_core::{Error, ErrorCategory, Result};
use kdbench_train::checkpoint::{self, META_FILE};
use kdbench_train::trainer::eval_loader;
use kdbench_train::{build_model, cka_heatmap, evaluate, grid_run, train_distill, two_stage_distill, Model};

#[derive(Parser)]
#[command(name = "kdbench", version, about = "Knowledge distillation benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a student from a job config (resumes an existing run).
    Distill {
        config: PathBuf,
        /// Dotted-path override, e.g. `recipe.base_lr=5e-3`. Repeatable.
        #[arg(long = "set", value_name = "PATH=VALUE")]
        set: Vec<String>,
        /// Validate and print the merged job without training.
        #[arg(long)]
        check: bool,
    },
    /// Evaluate a checkpoint (or a run's latest one) on a dataset split.
    Eval { checkpoint: PathBuf, split: String },
    /// Linear-CKA heatmap between two models over a probe split.
    ///
    /// A model is a checkpoint directory, a run directory, or
    /// `ARCH:WEIGHTS.safetensors` (class count and resolution then come
    /// from the other model's run).
    Cka {
        model_a: String,
        model_b: String,
        probe: String,
        #[arg(long, default_value_t = kdbench_train::analysis::PROBE_IMAGES)]
        images: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        /// Comma-separated layer ids for model A (default: every stage).
        #[arg(long)]
        rows: Option<String>,
        #[arg(long)]
        cols: Option<String>,
        #[arg(long, default_value = "cka.csv")]
        out: PathBuf,
    },
    /// Run every cell of a grid config and write a consolidated CSV.
    Grid {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// List the expanded cells without running them.
        #[arg(long)]
        check: bool,
    },
    /// Summarize runs into CSV tables (runs, gap table, gap vs scale).
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Built-in training recipes.
    Recipes {
        #[command(subcommand)]
        action: RecipesAction,
    },
}

#[derive(Subcommand)]
enum RecipesAction {
    List,
    Show { name: String },
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn out() -> std::io::StdoutLock<'static> {
    std::io::stdout().lock()
}

fn emit(text: &str) {
    let _ = writeln!(out(), "{text}");
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Distill { config, set, check } => distill(&config, &set, check),
        Command::Eval { checkpoint, split } => eval(&checkpoint, &split),
        Command::Cka {
            model_a,
            model_b,
            probe,
            images,
            batch,
            rows,
            cols,
            out,
        } => cka(&model_a, &model_b, &probe, images, batch, rows, cols, &out),
        Command::Grid { config, out, check } => grid(&config, out, check),
        Command::Report { runs, out } => report(&runs, &out),
        Command::Recipes { action } => recipes(action),
    }
}

fn distill(config: &Path, set: &[String], check: bool) -> Result<()> {
    let base = load_job(config)?;
    let overrides = set.iter().map(|s| parse_override(s)).collect::<Result<BTreeMap<_, _>>>()?;
    let spec = merge_overrides(&base, &overrides)?;
    let violations = spec.validate();
    if !violations.is_empty() {
        let text: Vec<String> = violations.iter().map(|v| format!("{}: {}", v.field, v.rule)).collect();
        return Err(Error::Config(text.join("; ")));
    }
    if check {
        emit(&format!("# run_id = {}", spec.run_id()));
        emit(&job_to_toml(&spec));
        return Ok(());
    }
    let outcome = if spec.unlabeled_stage.is_some() {
        two_stage_distill(&spec)?
    } else {
        train_distill(&spec)?
    };
    let summary = serde_json::json!({
        "run_dir": outcome.run_dir,
        "completed": outcome.completed,
        "steps": outcome.step_losses.len(),
        "stages": outcome.manifest.stages,
        "final": outcome.final_metrics,
    });
    emit(&serde_json::to_string_pretty(&summary).expect("json"));
    Ok(())
}

struct Loaded {
    model: Model,
    manifest: RunManifest,
    source: PathBuf,
}

/// Resolves a checkpoint directory or a run directory (latest checkpoint).
fn load_run_model(path: &Path) -> Result<Loaded> {
    let (run_dir, ckpt) = if path.join(META_FILE).exists() {
        let run = path.parent().ok_or_else(|| Error::Data(format!("{} has no run directory", path.display())))?;
        (run.to_path_buf(), path.to_path_buf())
    } else if path.join(MANIFEST_FILE).exists() {
        let latest = checkpoint::latest(path)?
            .ok_or_else(|| Error::Data(format!("run {} has no checkpoints", path.display())))?;
        (path.to_path_buf(), latest)
    } else {
        return Err(Error::Data(format!("{} is neither a checkpoint nor a run directory", path.display())));
    };
    let manifest = RunManifest::read(&run_dir)?;
    let spec = &manifest.spec;
    let model = build_model(
        &spec.student.arch,
        spec.dataset.class_count,
        spec.recipe.student_resolution,
        0.0,
        0,
    )?;
    model.store.load(&checkpoint::load(&ckpt)?.model, "")?;
    Ok(Loaded {
        model,
        manifest,
        source: ckpt,
    })
}

fn eval(path: &Path, split: &str) -> Result<()> {
    let l = load_run_model(path)?;
    let spec = &l.manifest.spec;
    let loader = eval_loader(&spec.dataset.with_split(split), &spec.recipe, spec.run.eval_batch_size, spec.run.workers)?;
    let r = evaluate(&l.model, &loader, None)?;
    let rec = serde_json::json!({
        "run_id": l.manifest.run_id,
        "checkpoint": l.source,
        "split": split,
        "top1": r.top1,
        "top5": r.top5,
        "loss": r.loss,
        "samples": r.samples,
    });
    emit(&serde_json::to_string_pretty(&rec).expect("json"));
    Ok(())
}

fn is_raw(arg: &str) -> bool {
    arg.split_once(':').is_some_and(|(_, f)| Path::new(f).is_file())
}

/// `ARCH:FILE` weights, shaped after the other model's run.
fn raw_weights(arg: &str, run: &RunManifest) -> Result<Model> {
    let (arch, file) = arg.split_once(':').expect("checked by is_raw");
    let model = build_model(arch, run.spec.dataset.class_count, run.spec.recipe.student_resolution, 0.0, 0)?;
    model.store.load_file(Path::new(file))?;
    Ok(model)
}

fn layer_list(arg: Option<String>, model: &Model) -> Vec<String> {
    match arg {
        Some(s) => s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect(),
        None => model.layer_ids(),
    }
}

#[allow(clippy::too_many_arguments)]
fn cka(a: &str, b: &str, probe: &str, images: usize, batch: usize, rows: Option<String>, cols: Option<String>, out: &Path) -> Result<()> {
    let la = if is_raw(a) { None } else { Some(load_run_model(Path::new(a))?) };
    let lb = if is_raw(b) { None } else { Some(load_run_model(Path::new(b))?) };
    let manifest = la.as_ref().or(lb.as_ref()).map(|l| l.manifest.clone()).ok_or_else(|| {
        Error::Config("at least one CKA model must be a run or checkpoint directory".into())
    })?;
    let model_a = match la {
        Some(l) => l.model,
        None => raw_weights(a, &manifest)?,
    };
    let model_b = match lb {
        Some(l) => l.model,
        None => raw_weights(b, &manifest)?,
    };
    let spec = &manifest.spec;
    let probe_ref = spec.dataset.with_split(probe);
    let loader: Loader = eval_loader(&probe_ref, &spec.recipe, batch, spec.run.workers)?;
    let rows = layer_list(rows, &model_a);
    let cols = layer_list(cols, &model_b);
    let matrix = cka_heatmap(&model_a, &model_b, &loader, &rows, &cols, images)?;
    std::fs::write(out, matrix.to_long_csv()).map_err(|e| Error::io(out, e))?;
    let mut text = String::from("row\\col");
    for c in &matrix.cols {
        text.push_str(&format!("\t{c}"));
    }
    for (i, r) in matrix.rows.iter().enumerate() {
        text.push_str(&format!("\n{r}"));
        for j in 0..matrix.cols.len() {
            text.push_str(&format!("\t{:.3}", matrix.values[[i, j]]));
        }
    }
    emit(&text);
    emit(&format!("wrote {}", out.display()));
    Ok(())
}

fn grid(config: &Path, out_dir: Option<PathBuf>, check: bool) -> Result<()> {
    let grid = load_grid(config)?;
    if check {
        for cell in grid.cells()? {
            let axes: Vec<String> = cell.assignment.iter().map(|(k, v)| format!("{k}={v}")).collect();
            emit(&format!("cell {:03} {} {}", cell.index, cell.spec.run_id(), axes.join(" ")));
        }
        return Ok(());
    }
    let out_dir = out_dir.unwrap_or_else(|| grid.base.run.runs_dir.join("grids").join(&grid.base.name));
    let run = grid_run(&grid, &out_dir)?;
    let mut failed = 0;
    for (cell, outcome) in &run.results {
        match outcome {
            CellOutcome::Done { run_id, metrics } => {
                emit(&format!("cell {:03} {run_id}: top1 {:.2}", cell.index, metrics.top1));
            }
            CellOutcome::Failed { run_id, error } => {
                failed += 1;
                eprintln!("cell {:03} {run_id} failed: {error}", cell.index);
            }
        }
    }
    emit(&format!(
        "{} cells, {failed} failed; wrote {}",
        run.results.len(),
        run.csv_path.display()
    ));
    Ok(())
}

/// Run directories among `paths`; a directory without a manifest is
/// searched one level down.
fn expand_runs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.join(MANIFEST_FILE).exists() {
            out.push(p.clone());
            continue;
        }
        let entries = std::fs::read_dir(p).map_err(|e| Error::io(p, e))?;
        let mut found: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|d| d.join(MANIFEST_FILE).exists())
            .collect();
        found.sort();
        out.extend(found);
    }
    Ok(out)
}

fn report(runs: &[PathBuf], out_dir: &Path) -> Result<()> {
    let dirs = expand_runs(runs)?;
    let files = emit_report(&dirs, out_dir)?;
    for g in &files.gaps.entries {
        emit(&format!(
            "{} @ {}: KD {:.2} vs {} {:.2} (delta {:+.2})",
            g.pair, g.scale, g.accuracies["KD"], g.best_other, g.accuracies[&g.best_other], g.delta
        ));
    }
    emit(&format!("{} runs; wrote {}", dirs.len(), out_dir.display()));
    Ok(())
}

fn recipes(action: RecipesAction) -> Result<()> {
    match action {
        RecipesAction::List => {
            for name in BUILTIN_RECIPES {
                let r = builtin_recipe(name)?;
                emit(&format!(
                    "{name}\t{:?} lr {} bs {} wd {} epochs {}",
                    r.optimizer, r.base_lr, r.batch_size, r.weight_decay, r.epochs
                ));
            }
        }
        RecipesAction::Show { name } => {
            let r = builtin_recipe(&name)?;
            emit(&toml::to_string(&r).expect("recipe serializes"));
        }
    }
    Ok(())
}
