//! Batch assembly on top of datasets, pipelines and samplers.

use std::sync::Arc;

use ndarray::{Array4, Axis};

use super::augment::Pipeline;
use super::dataset::Dataset;
use super::sampler::RepeatedAugSampler;
use super::stream_rng;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// N×3×H×W, normalized.
    pub images: Array4<f32>,
    pub targets: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Transforms samples `indices`, each with its own stream keyed by
/// `(seed, epoch, step, slot)`, on up to `workers` threads.
fn assemble(
    dataset: &dyn Dataset,
    pipeline: &Pipeline,
    indices: &[usize],
    key: [u64; 3],
    workers: usize,
) -> Result<Array4<f32>> {
    let n = indices.len();
    if n == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let one = |slot: usize| -> Result<ndarray::Array3<f32>> {
        let img = dataset.image(indices[slot])?;
        pipeline.apply(&img, &mut stream_rng(&[key[0], key[1], key[2], slot as u64]))
    };
    let workers = workers.clamp(1, n);
    let mut samples: Vec<Option<Result<ndarray::Array3<f32>>>> = (0..n).map(|_| None).collect();
    if workers == 1 {
        for (slot, s) in samples.iter_mut().enumerate() {
            *s = Some(one(slot));
        }
    } else {
        let chunk = n.div_ceil(workers);
        std::thread::scope(|scope| {
            for (w, part) in samples.chunks_mut(chunk).enumerate() {
                let one = &one;
                scope.spawn(move || {
                    for (i, s) in part.iter_mut().enumerate() {
                        *s = Some(one(w * chunk + i));
                    }
                });
            }
        });
    }
    let samples: Vec<ndarray::Array3<f32>> = samples
        .into_iter()
        .map(|s| s.expect("every slot filled"))
        .collect::<Result<_>>()?;
    let first = samples[0].dim();
    if let Some(bad) = samples.iter().find(|s| s.dim() != first) {
        return Err(Error::Data(format!("sample shapes differ: {:?} vs {:?}", first, bad.dim())));
    }
    let views: Vec<_> = samples.iter().map(|s| s.view()).collect();
    Ok(ndarray::stack(Axis(0), &views).expect("equal shapes"))
}

/// Training/eval batch source; batches are pure functions of
/// `(seed, epoch, step)` so any step can be regenerated on resume.
pub struct Loader {
    dataset: Arc<dyn Dataset>,
    pipeline: Pipeline,
    sampler: RepeatedAugSampler,
    workers: usize,
    shuffle: bool,
}

impl Loader {
    pub fn train(
        dataset: Arc<dyn Dataset>,
        pipeline: Pipeline,
        batch_size: usize,
        repeats: usize,
        seed: u64,
        workers: usize,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let sampler = RepeatedAugSampler::new(dataset.len(), batch_size, repeats, seed);
        Ok(Self { dataset, pipeline, sampler, workers, shuffle: true })
    }

    /// Sequential, unshuffled, single pass.
    pub fn eval(dataset: Arc<dyn Dataset>, pipeline: Pipeline, batch_size: usize, workers: usize) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Data("evaluation split is empty".into()));
        }
        let sampler = RepeatedAugSampler::new(dataset.len(), batch_size, 1, 0);
        Ok(Self { dataset, pipeline, sampler, workers, shuffle: false })
    }

    pub fn dataset(&self) -> &Arc<dyn Dataset> {
        &self.dataset
    }

    pub fn class_count(&self) -> usize {
        self.dataset.class_count()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.sampler.batches_per_epoch()
    }

    pub fn epoch_plan(&self, epoch: u64) -> Vec<Vec<usize>> {
        if self.shuffle {
            self.sampler.epoch(epoch)
        } else {
            let all: Vec<usize> = (0..self.dataset.len()).collect();
            all.chunks(self.sampler.batch_size).map(<[usize]>::to_vec).collect()
        }
    }

    pub fn batch_from_plan(&self, plan: &[Vec<usize>], epoch: u64, step: usize) -> Result<Batch> {
        let indices = plan
            .get(step)
            .ok_or_else(|| Error::Data(format!("step {step} beyond epoch of {} batches", plan.len())))?
            .clone();
        let images = assemble(
            self.dataset.as_ref(),
            &self.pipeline,
            &indices,
            [self.sampler.seed, epoch, step as u64],
            self.workers,
        )?;
        let targets = indices.iter().map(|&i| self.dataset.label(i)).collect();
        Ok(Batch { images, targets, indices })
    }

    pub fn batch(&self, epoch: u64, step: usize) -> Result<Batch> {
        self.batch_from_plan(&self.epoch_plan(epoch), epoch, step)
    }
}

/// Image-only stream over an auxiliary pool; labels, if any, are dropped.
/// Cycles through reshuffled passes so any iteration budget can be met.
pub struct UnlabeledPool {
    loader: Loader,
}

impl UnlabeledPool {
    pub fn new(dataset: Arc<dyn Dataset>, pipeline: Pipeline, batch_size: usize, seed: u64, workers: usize) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Data("unlabeled pool is empty".into()));
        }
        Ok(Self {
            loader: Loader::train(dataset, pipeline, batch_size, 1, seed, workers)?,
        })
    }

    /// Images for global iteration `iteration`.
    pub fn batch(&self, iteration: u64) -> Result<Array4<f32>> {
        let per = self.loader.steps_per_epoch() as u64;
        let pass = iteration / per;
        let step = (iteration % per) as usize;
        Ok(self.loader.batch(pass, step)?.images)
    }

    /// Exactly `budget` batches.
    pub fn iter(&self, budget: u64) -> impl Iterator<Item = Result<Array4<f32>>> + '_ {
        (0..budget).map(move |i| self.batch(i))
    }
}
