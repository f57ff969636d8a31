//! Training strategies, experiment specs and config-tree handling.

mod job;
mod recipe;
mod tree;

pub use job::{
    default_hint_pairs, DistillJobSpec, HintMetric, HintPair, Method, ModelRef, RunOptions,
    SoftLoss, UnlabeledStage,
};
pub use recipe::{
    builtin_recipe, validate_recipe, LabelLoss, LrSchedule, OptimizerKind, RandAugmentSpec,
    TrainingRecipe, Violation, BUILTIN_RECIPES, DEFAULT_EMA_DECAY,
};
pub use tree::{
    job_to_toml, load_job, merge_overrides, parse_job, parse_override, parse_override_value,
    parse_tree, Overrides,
};
