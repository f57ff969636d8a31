use rand::seq::SliceRandom;

use super::stream_rng;

/// Shuffled batch sampler in which each drawn sample appears `repeats` times
/// in its batch. With `repeats = 1` it is a plain shuffled sampler.
///
/// An epoch has `ceil(dataset_size / batch_size)` batches; the last one may be
/// short. A batch of size `b` holds `ceil(b / repeats)` distinct indices, so an
/// epoch touches about `dataset_size / repeats` distinct samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepeatedAugSampler {
    pub dataset_size: usize,
    pub batch_size: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl RepeatedAugSampler {
    pub fn new(dataset_size: usize, batch_size: usize, repeats: usize, seed: u64) -> Self {
        assert!(batch_size >= 1 && repeats >= 1, "batch_size and repeats must be >= 1");
        Self {
            dataset_size,
            batch_size,
            repeats,
            seed,
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.dataset_size.div_ceil(self.batch_size)
    }

    pub fn distinct_per_batch(&self) -> usize {
        self.batch_size.div_ceil(self.repeats)
    }

    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        if self.dataset_size == 0 {
            return Vec::new();
        }
        let mut order: Vec<usize> = (0..self.dataset_size).collect();
        order.shuffle(&mut stream_rng(&[self.seed, epoch, 0x5A3D]));
        let mut cursor = 0usize;
        let mut out = Vec::with_capacity(self.batches_per_epoch());
        for b in 0..self.batches_per_epoch() {
            let size = self.batch_size.min(self.dataset_size - b * self.batch_size);
            let distinct = size.div_ceil(self.repeats);
            let mut batch = Vec::with_capacity(distinct * self.repeats);
            for _ in 0..distinct {
                let idx = order[cursor % self.dataset_size];
                cursor += 1;
                batch.extend(std::iter::repeat_n(idx, self.repeats));
            }
            batch.truncate(size);
            out.push(batch);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn plain_sampler_is_a_permutation() {
        let s = RepeatedAugSampler::new(10, 4, 1, 0);
        let all: Vec<usize> = s.epoch(0).concat();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(s.epoch(0).iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
    }

    #[test]
    fn repeats_of_three() {
        let s = RepeatedAugSampler::new(20_000, 2048, 3, 1);
        assert_eq!(s.distinct_per_batch(), 683);
        let first = &s.epoch(0)[0];
        assert_eq!(first.len(), 2048);
        assert_eq!(first.iter().collect::<HashSet<_>>().len(), 683);
    }

    #[test]
    fn deterministic_per_epoch() {
        let s = RepeatedAugSampler::new(100, 8, 3, 9);
        assert_eq!(s.epoch(2), s.epoch(2));
        assert_ne!(s.epoch(2), s.epoch(3));
    }
}
