//! Student/teacher networks on candle and the distillation training loop.

pub mod amp;
pub mod analysis;
pub mod checkpoint;
pub mod ema;
pub mod models;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod params;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use analysis::{cka_heatmap, grid_run, GridRun};
pub use ema::ema_update;
pub use models::{build_model, Forward, Model, ARCHITECTURES};
pub use schedule::{lr_at, ScheduleState};
pub use trainer::{evaluate, train_distill, two_stage_distill, RunOutcome};
