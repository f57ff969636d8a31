pub mod hint;
pub mod logits;

pub use hint::{cc_loss, hint_loss, rkd_loss, FeatureMap, Projector, ProjectorKind, ProjectorNorm, ProjectorSpec};
pub use logits::{
    bce_loss, bkl_loss, ce_loss, dist_inter, dist_intra, dist_loss, dkd_loss, kl_soft_loss,
    softmax_temperature, vanilla_kd_loss, HardLoss, HardTargetBatch, LogitsBatch, LossBreakdown,
    ProbBatch, SoftMeasure,
};
