//! Training strategies and their validation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum OptimizerKind {
    Lamb,
    Adamw,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LrSchedule {
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LabelLoss {
    Ce,
    Bce,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandAugmentSpec {
    pub magnitude: u32,
    /// Per-operation application probability.
    pub probability: f64,
}

/// Every knob of a training strategy. Field names double as config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingRecipe {
    pub name: String,
    pub teacher_resolution: u32,
    pub student_resolution: u32,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub betas: [f64; 2],
    pub eps: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub base_lr: f64,
    pub lr_schedule: LrSchedule,
    pub warmup_epochs: u32,
    pub amp: bool,
    pub ema: bool,
    pub ema_decay: f64,
    pub label_loss: LabelLoss,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub drop_path_rate: f64,
    pub repeated_aug_count: usize,
    pub hflip: bool,
    pub random_resized_crop: bool,
    /// Zero-padded random crop (pixels of padding); 0 disables it.
    #[serde(default)]
    pub random_crop_padding: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rand_augment: Option<RandAugmentSpec>,
    pub auto_augment: bool,
    pub random_erasing_prob: f64,
    pub mixup_alpha: f64,
    pub cutmix_alpha: f64,
    pub epochs: u32,
}

pub const BUILTIN_RECIPES: [&str; 4] = ["A1", "A2", "B", "C"];

pub const DEFAULT_EMA_DECAY: f64 = 0.9999;

fn large_scale_common(name: &str) -> TrainingRecipe {
    TrainingRecipe {
        name: name.to_string(),
        teacher_resolution: 224,
        student_resolution: 224,
        batch_size: 2048,
        optimizer: OptimizerKind::Lamb,
        betas: [0.9, 0.999],
        eps: 1e-6,
        momentum: 0.0,
        nesterov: false,
        base_lr: 5e-3,
        lr_schedule: LrSchedule::Cosine,
        warmup_epochs: 5,
        amp: true,
        ema: false,
        ema_decay: DEFAULT_EMA_DECAY,
        label_loss: LabelLoss::Bce,
        weight_decay: 0.03,
        label_smoothing: 0.0,
        drop_path_rate: 0.05,
        repeated_aug_count: 3,
        hflip: true,
        random_resized_crop: true,
        random_crop_padding: 0,
        rand_augment: Some(RandAugmentSpec {
            magnitude: 7,
            probability: 0.5,
        }),
        auto_augment: false,
        random_erasing_prob: 0.0,
        mixup_alpha: 0.1,
        cutmix_alpha: 1.0,
        epochs: 300,
    }
}

/// Returns one of the built-in strategies `A1`, `A2` (large-batch LAMB),
/// `B` (AdamW, ImageNet) or `C` (SGD, CIFAR-100).
pub fn builtin_recipe(name: &str) -> Result<TrainingRecipe> {
    let recipe = match name {
        "A2" => large_scale_common("A2"),
        "A1" => TrainingRecipe {
            weight_decay: 0.01,
            label_smoothing: 0.1,
            mixup_alpha: 0.2,
            epochs: 600,
            ..large_scale_common("A1")
        },
        "B" => TrainingRecipe {
            name: "B".into(),
            teacher_resolution: 224,
            student_resolution: 224,
            batch_size: 1024,
            optimizer: OptimizerKind::Adamw,
            betas: [0.9, 0.999],
            eps: 1e-8,
            momentum: 0.0,
            nesterov: false,
            base_lr: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            warmup_epochs: 20,
            amp: true,
            ema: false,
            ema_decay: DEFAULT_EMA_DECAY,
            label_loss: LabelLoss::Ce,
            weight_decay: 5e-2,
            label_smoothing: 0.0,
            drop_path_rate: 0.0,
            repeated_aug_count: 1,
            hflip: true,
            random_resized_crop: true,
            random_crop_padding: 0,
            rand_augment: Some(RandAugmentSpec {
                magnitude: 7,
                probability: 0.5,
            }),
            auto_augment: false,
            random_erasing_prob: 0.25,
            mixup_alpha: 0.1,
            cutmix_alpha: 1.0,
            epochs: 300,
        },
        "C" => TrainingRecipe {
            name: "C".into(),
            teacher_resolution: 32,
            student_resolution: 32,
            batch_size: 512,
            optimizer: OptimizerKind::Sgd,
            betas: [0.9, 0.999],
            eps: 1e-8,
            momentum: 0.9,
            nesterov: false,
            base_lr: 5e-2,
            lr_schedule: LrSchedule::Cosine,
            warmup_epochs: 0,
            amp: false,
            ema: false,
            ema_decay: DEFAULT_EMA_DECAY,
            label_loss: LabelLoss::Ce,
            weight_decay: 5e-4,
            label_smoothing: 0.0,
            drop_path_rate: 0.0,
            repeated_aug_count: 1,
            hflip: true,
            random_resized_crop: false,
            random_crop_padding: 4,
            rand_augment: None,
            auto_augment: true,
            random_erasing_prob: 0.0,
            mixup_alpha: 0.1,
            cutmix_alpha: 0.0,
            epochs: 2400,
        },
        other => {
            return Err(Error::NotFound {
                kind: "recipe",
                name: other.to_string(),
                valid: BUILTIN_RECIPES.join(", "),
            })
        }
    };
    Ok(recipe)
}

/// A broken invariant: the offending field path and the rule it violates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

fn in_unit(x: f64, closed_right: bool) -> bool {
    x >= 0.0 && if closed_right { x <= 1.0 } else { x < 1.0 }
}

pub fn validate_recipe(recipe: &TrainingRecipe) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut check = |ok: bool, field: &str, rule: &str| {
        if !ok {
            out.push(Violation::new(field, rule));
        }
    };
    check(
        recipe.base_lr > 0.0 && recipe.base_lr.is_finite(),
        "base_lr",
        "must be > 0",
    );
    check(recipe.batch_size >= 1, "batch_size", "must be >= 1");
    check(recipe.epochs >= 1, "epochs", "must be >= 1");
    check(
        recipe.warmup_epochs < recipe.epochs,
        "warmup_epochs",
        "must be < epochs",
    );
    check(
        recipe.teacher_resolution >= 1,
        "teacher_resolution",
        "must be >= 1",
    );
    check(
        recipe.student_resolution >= 1,
        "student_resolution",
        "must be >= 1",
    );
    check(
        !(recipe.rand_augment.is_some() && recipe.auto_augment),
        "rand_augment/auto_augment",
        "at most one of rand_augment and auto_augment may be active",
    );
    if let Some(ra) = &recipe.rand_augment {
        check(
            in_unit(ra.probability, true),
            "rand_augment.probability",
            "must be in [0, 1]",
        );
        check(ra.magnitude <= 30, "rand_augment.magnitude", "must be <= 30");
    }
    check(in_unit(recipe.ema_decay, false), "ema_decay", "must be in [0, 1)");
    check(recipe.weight_decay >= 0.0, "weight_decay", "must be >= 0");
    check(
        in_unit(recipe.label_smoothing, false),
        "label_smoothing",
        "must be in [0, 1)",
    );
    check(
        in_unit(recipe.drop_path_rate, false),
        "drop_path_rate",
        "must be in [0, 1)",
    );
    check(
        recipe.repeated_aug_count >= 1,
        "repeated_aug_count",
        "must be >= 1",
    );
    check(
        in_unit(recipe.random_erasing_prob, true),
        "random_erasing_prob",
        "must be in [0, 1]",
    );
    check(recipe.mixup_alpha >= 0.0, "mixup_alpha", "must be >= 0");
    check(recipe.cutmix_alpha >= 0.0, "cutmix_alpha", "must be >= 0");
    check(
        in_unit(recipe.betas[0], false) && in_unit(recipe.betas[1], false),
        "betas",
        "must be in [0, 1)",
    );
    check(recipe.eps > 0.0, "eps", "must be > 0");
    check(in_unit(recipe.momentum, false), "momentum", "must be in [0, 1)");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a2_matches_table_values() {
        let r = builtin_recipe("A2").unwrap();
        assert_eq!(r.optimizer, OptimizerKind::Lamb);
        assert_eq!(r.base_lr, 5e-3);
        assert_eq!(r.batch_size, 2048);
        assert_eq!(r.warmup_epochs, 5);
        assert_eq!(r.weight_decay, 0.03);
        assert_eq!(r.label_smoothing, 0.0);
        assert_eq!(r.mixup_alpha, 0.1);
        assert_eq!(r.cutmix_alpha, 1.0);
        assert_eq!(r.repeated_aug_count, 3);
        assert_eq!(
            r.rand_augment,
            Some(RandAugmentSpec {
                magnitude: 7,
                probability: 0.5
            })
        );
        assert_eq!(r.label_loss, LabelLoss::Bce);
        assert!(!r.ema);
        assert!(r.amp);
        assert_eq!(r.drop_path_rate, 0.05);
        assert_eq!((r.teacher_resolution, r.student_resolution), (224, 224));
    }

    #[test]
    fn c_matches_table_values() {
        let r = builtin_recipe("C").unwrap();
        assert_eq!(r.optimizer, OptimizerKind::Sgd);
        assert_eq!(r.base_lr, 5e-2);
        assert_eq!(r.batch_size, 512);
        assert_eq!(r.lr_schedule, LrSchedule::Cosine);
        assert_eq!(r.warmup_epochs, 0);
        assert!(!r.amp);
        assert_eq!(r.label_loss, LabelLoss::Ce);
        assert_eq!(r.weight_decay, 5e-4);
        assert!(r.hflip);
        assert!(r.auto_augment);
        assert!(r.rand_augment.is_none());
        assert_eq!(r.random_erasing_prob, 0.0);
        assert_eq!(r.mixup_alpha, 0.1);
        assert_eq!(r.cutmix_alpha, 0.0);
    }

    #[test]
    fn a1_differs_from_a2_in_three_fields() {
        let a1 = builtin_recipe("A1").unwrap();
        let a2 = builtin_recipe("A2").unwrap();
        assert_eq!(a1.weight_decay, 0.01);
        assert_eq!(a1.label_smoothing, 0.1);
        assert_eq!(a1.mixup_alpha, 0.2);
        let normalized = TrainingRecipe {
            name: a2.name.clone(),
            weight_decay: a2.weight_decay,
            label_smoothing: a2.label_smoothing,
            mixup_alpha: a2.mixup_alpha,
            epochs: a2.epochs,
            ..a1
        };
        assert_eq!(normalized, a2);
    }

    #[test]
    fn b_matches_table_values() {
        let r = builtin_recipe("B").unwrap();
        assert_eq!(r.optimizer, OptimizerKind::Adamw);
        assert_eq!((r.base_lr, r.batch_size, r.warmup_epochs), (1e-3, 1024, 20));
        assert_eq!(r.random_erasing_prob, 0.25);
        assert_eq!(r.weight_decay, 5e-2);
        assert_eq!(r.label_loss, LabelLoss::Ce);
    }

    #[test]
    fn builtins_validate_and_are_pure() {
        for name in BUILTIN_RECIPES {
            let r = builtin_recipe(name).unwrap();
            assert!(validate_recipe(&r).is_empty(), "{name}: {:?}", validate_recipe(&r));
            assert_eq!(r, builtin_recipe(name).unwrap());
        }
    }

    #[test]
    fn unknown_recipe_lists_valid_names() {
        let err = builtin_recipe("A3").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("A1, A2, B, C"), "{msg}");
    }

    #[test]
    fn warmup_equal_to_epochs_is_one_violation() {
        let mut r = builtin_recipe("A2").unwrap();
        r.warmup_epochs = r.epochs;
        let v = validate_recipe(&r);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "warmup_epochs");
    }

    #[test]
    fn rand_and_auto_augment_are_exclusive() {
        let mut r = builtin_recipe("A2").unwrap();
        r.auto_augment = true;
        let v = validate_recipe(&r);
        assert_eq!(v.len(), 1);
        assert!(v[0].rule.contains("at most one"));
    }
}
