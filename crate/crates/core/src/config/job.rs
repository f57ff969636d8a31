//! One distillation experiment, as read from a config file.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::recipe::{builtin_recipe, validate_recipe, LabelLoss, RandAugmentSpec, Violation};
use super::TrainingRecipe;
use crate::data::{DatasetRef, SubsetSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Kd,
    Dkd,
    Dist,
    Hint,
    Cc,
    Rkd,
    /// Reserved identifier; not implemented.
    Crd,
    /// Reserved identifier; not implemented.
    Reviewkd,
}

impl Method {
    pub fn is_hint_based(self) -> bool {
        matches!(self, Method::Hint | Method::Cc | Method::Rkd | Method::Crd | Method::Reviewkd)
    }

    pub fn is_reserved(self) -> bool {
        matches!(self, Method::Crd | Method::Reviewkd)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Kd => "KD",
            Method::Dkd => "DKD",
            Method::Dist => "DIST",
            Method::Hint => "HINT",
            Method::Cc => "CC",
            Method::Rkd => "RKD",
            Method::Crd => "CRD",
            Method::Reviewkd => "REVIEWKD",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SoftLoss {
    Kl,
    Bkl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum HintMetric {
    L1,
    L2,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRef {
    pub arch: String,
    /// Parameter file; absent means random initialization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl ModelRef {
    pub fn new(arch: &str) -> Self {
        Self {
            arch: arch.to_string(),
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HintPair {
    pub student: String,
    pub teacher: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlabeledStage {
    pub pool: DatasetRef,
    pub iterations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOptions {
    #[serde(default = "default_runs_dir")]
    pub runs_dir: PathBuf,
    /// Hard cap on optimizer steps (smoke runs). Does not change the schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_max_batches: Option<usize>,
    #[serde(default = "one_u32")]
    pub checkpoint_every: u32,
    #[serde(default = "default_true")]
    pub deterministic: bool,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default = "one_usize")]
    pub workers: usize,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
}

fn default_runs_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn one_u32() -> u32 {
    1
}
fn one_usize() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_eval_batch() -> usize {
    256
}
fn default_log_every() -> u64 {
    50
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            runs_dir: default_runs_dir(),
            max_steps: None,
            eval_max_batches: None,
            checkpoint_every: 1,
            deterministic: true,
            eval_batch_size: default_eval_batch(),
            workers: 1,
            log_every: default_log_every(),
        }
    }
}

fn d_alpha() -> f64 {
    0.5
}
fn d_one() -> f64 {
    1.0
}
fn d_two() -> f64 {
    2.0
}
fn d_soft() -> SoftLoss {
    SoftLoss::Kl
}
fn d_metric() -> HintMetric {
    HintMetric::L2
}
fn d_rkd_distance() -> f64 {
    25.0
}
fn d_rkd_angle() -> f64 {
    50.0
}
fn d_eval_split() -> String {
    "val".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillJobSpec {
    pub name: String,
    pub teacher: ModelRef,
    pub student: ModelRef,
    pub method: Method,
    /// Hard-label weight; the soft term gets `1 - alpha`.
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_one")]
    pub temperature: f64,
    #[serde(default = "d_soft")]
    pub soft_loss: SoftLoss,
    #[serde(default = "d_one")]
    pub dkd_alpha: f64,
    #[serde(default = "d_two")]
    pub dkd_beta: f64,
    #[serde(default = "d_one")]
    pub dist_beta: f64,
    #[serde(default = "d_one")]
    pub dist_gamma: f64,
    #[serde(default)]
    pub hint_layer_pairs: Vec<HintPair>,
    #[serde(default = "d_one")]
    pub hint_weight: f64,
    #[serde(default = "d_metric")]
    pub hint_metric: HintMetric,
    #[serde(default = "d_rkd_distance")]
    pub rkd_distance_weight: f64,
    #[serde(default = "d_rkd_angle")]
    pub rkd_angle_weight: f64,
    pub dataset: DatasetRef,
    #[serde(default = "d_eval_split")]
    pub eval_split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<SubsetSpec>,
    pub recipe: TrainingRecipe,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unlabeled_stage: Option<UnlabeledStage>,
    #[serde(default)]
    pub run: RunOptions,
}

impl DistillJobSpec {
    /// A spec with every method hyper-parameter at its default.
    pub fn new(
        name: &str,
        teacher: ModelRef,
        student: ModelRef,
        method: Method,
        dataset: DatasetRef,
        recipe: TrainingRecipe,
    ) -> Self {
        let hint_layer_pairs = if method.is_hint_based() {
            default_hint_pairs(method)
        } else {
            Vec::new()
        };
        Self {
            name: name.to_string(),
            teacher,
            student,
            method,
            alpha: d_alpha(),
            temperature: 1.0,
            soft_loss: SoftLoss::Kl,
            dkd_alpha: 1.0,
            dkd_beta: 2.0,
            dist_beta: 1.0,
            dist_gamma: 1.0,
            hint_layer_pairs,
            hint_weight: 1.0,
            hint_metric: HintMetric::L2,
            rkd_distance_weight: d_rkd_distance(),
            rkd_angle_weight: d_rkd_angle(),
            dataset,
            eval_split: d_eval_split(),
            subset: None,
            recipe,
            seed: 0,
            unlabeled_stage: None,
            run: RunOptions::default(),
        }
    }

    /// Every optional branch populated; defines the set of valid override paths.
    pub fn schema() -> Self {
        let mut recipe = builtin_recipe("A2").expect("builtin");
        recipe.rand_augment = Some(RandAugmentSpec {
            magnitude: 7,
            probability: 0.5,
        });
        let mut dataset = DatasetRef::preset("synthetic").expect("preset");
        dataset.index_file = Some(PathBuf::from("indices.txt"));
        let mut spec = Self::new(
            "schema",
            ModelRef {
                arch: "resnet20".into(),
                checkpoint: Some(PathBuf::from("teacher.safetensors")),
            },
            ModelRef {
                arch: "resnet20".into(),
                checkpoint: Some(PathBuf::from("student.safetensors")),
            },
            Method::Kd,
            dataset.clone(),
            recipe,
        );
        spec.subset = Some(SubsetSpec {
            fraction: 1.0,
            stratified: true,
            seed: 0,
        });
        spec.unlabeled_stage = Some(UnlabeledStage {
            pool: dataset,
            iterations: 0,
        });
        spec.run.max_steps = Some(0);
        spec.run.eval_max_batches = Some(0);
        spec
    }

    /// Stable content hash (hex sha256 of the canonical JSON form).
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Hash of everything that affects the trained model; `run` options
    /// (step caps, worker counts, output paths) are excluded so a capped run
    /// and its continuation share one run directory.
    pub fn identity_hash(&self) -> String {
        let mut core = self.clone();
        core.run = RunOptions::default();
        core.content_hash()
    }

    /// `<name>-<first 12 hex digits of identity_hash>`.
    pub fn run_id(&self) -> String {
        format!("{}-{}", self.name, &self.identity_hash()[..12])
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut out: Vec<Violation> = validate_recipe(&self.recipe)
            .into_iter()
            .map(|v| Violation::new(format!("recipe.{}", v.field), v.rule))
            .collect();
        let mut check = |ok: bool, field: &str, rule: &str| {
            if !ok {
                out.push(Violation::new(field, rule));
            }
        };
        check((0.0..=1.0).contains(&self.alpha), "alpha", "must be in [0, 1]");
        check(
            self.temperature > 0.0 && self.temperature.is_finite(),
            "temperature",
            "must be > 0",
        );
        check(
            !(self.method == Method::Kd && self.alpha > 0.0 && self.recipe.label_loss == LabelLoss::None),
            "alpha",
            "alpha > 0 requires recipe.label_loss != NONE",
        );
        check(
            !(self.method.is_hint_based() && self.hint_layer_pairs.is_empty()),
            "hint_layer_pairs",
            "hint-based methods need at least one layer pair",
        );
        check(
            !self.method.is_reserved(),
            "method",
            "CRD and REVIEWKD are reserved identifiers without an implementation",
        );
        for (field, v) in [
            ("dkd_alpha", self.dkd_alpha),
            ("dkd_beta", self.dkd_beta),
            ("dist_beta", self.dist_beta),
            ("dist_gamma", self.dist_gamma),
            ("hint_weight", self.hint_weight),
            ("rkd_distance_weight", self.rkd_distance_weight),
            ("rkd_angle_weight", self.rkd_angle_weight),
        ] {
            check(v >= 0.0 && v.is_finite(), field, "must be >= 0");
        }
        check(
            self.recipe.teacher_resolution == self.recipe.student_resolution,
            "recipe.teacher_resolution",
            "teacher and student consume identical images; resolutions must match",
        );
        check(
            self.dataset.class_count >= 2,
            "dataset.class_count",
            "must be >= 2",
        );
        if let Some(s) = &self.subset {
            check(
                s.fraction > 0.0 && s.fraction <= 1.0,
                "subset.fraction",
                "must be in (0, 1]",
            );
        }
        check(self.run.eval_batch_size >= 1, "run.eval_batch_size", "must be >= 1");
        check(self.run.checkpoint_every >= 1, "run.checkpoint_every", "must be >= 1");
        check(self.run.workers >= 1, "run.workers", "must be >= 1");
        out
    }
}

/// Hint pairs used when none are configured: the last feature stage for
/// feature matching, the pooled embedding for relational losses.
pub fn default_hint_pairs(method: Method) -> Vec<HintPair> {
    let layer = match method {
        Method::Cc | Method::Rkd | Method::Crd => "pool",
        _ => "last",
    };
    vec![HintPair {
        student: layer.into(),
        teacher: layer.into(),
    }]
}
