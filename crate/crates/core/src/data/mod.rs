//! Dataset ingestion, subsetting, augmentation, batch mixing and sampling.

pub mod augment;
pub mod dataset;
pub mod loader;
pub mod mixing;
pub mod ops;
pub mod sampler;
pub mod subset;

pub use augment::{build_augmentation, AutoAugmentPolicy, Pipeline, Transform};
pub use dataset::{Dataset, DatasetKind, DatasetRef};
pub use loader::{Batch, Loader, UnlabeledPool};
pub use mixing::{apply_cutmix, apply_mixing, apply_mixup, cutmix_with_box, mixup_with, CutBox, MixKind, MixedBatch};
pub use sampler::RepeatedAugSampler;
pub use subset::{stratified_subset, subset_dataset, SubsetSpec};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the random stream identified by `key`, e.g. (seed, epoch, step, slot).
pub fn stream_seed(key: &[u64]) -> u64 {
    key.iter().fold(0x5EED_u64, |acc, &k| splitmix(acc ^ splitmix(k)))
}

pub fn stream_rng(key: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(key))
}
