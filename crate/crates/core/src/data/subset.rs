use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{write_index_file, DatasetRef};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetSpec {
    pub fraction: f64,
    #[serde(default = "default_true")]
    pub stratified: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

/// Selects `round(fraction * n_c)` samples from every class `c`, returned as
/// sorted dataset indices. Unstratified mode draws `round(fraction * n)`
/// samples from the whole set.
pub fn stratified_subset(labels: &[usize], class_count: usize, spec: &SubsetSpec) -> Result<Vec<usize>> {
    if !(spec.fraction > 0.0 && spec.fraction <= 1.0) {
        return Err(Error::Subset(format!(
            "fraction {} outside (0, 1]",
            spec.fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut chosen = Vec::new();
    if spec.stratified {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
        for (i, &y) in labels.iter().enumerate() {
            if y >= class_count {
                return Err(Error::Subset(format!(
                    "sample {i} has label {y} >= class count {class_count}"
                )));
            }
            by_class[y].push(i);
        }
        for (class, mut members) in by_class.into_iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let exact = spec.fraction * members.len() as f64;
            if exact < 1.0 {
                return Err(Error::Subset(format!(
                    "class {class}: fraction {} of {} samples selects none",
                    spec.fraction,
                    members.len()
                )));
            }
            let take = exact.round() as usize;
            members.shuffle(&mut rng);
            chosen.extend_from_slice(&members[..take]);
        }
    } else {
        let take = (spec.fraction * labels.len() as f64).round() as usize;
        if take == 0 {
            return Err(Error::Subset("fraction selects no samples".into()));
        }
        let mut all: Vec<usize> = (0..labels.len()).collect();
        all.shuffle(&mut rng);
        chosen.extend_from_slice(&all[..take]);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Materializes a subset of `dataset` as an index file under `out_dir` and
/// returns a reference restricted to it.
pub fn subset_dataset(dataset: &DatasetRef, spec: &SubsetSpec, out_dir: &Path) -> Result<DatasetRef> {
    if spec.fraction == 1.0 {
        return Ok(dataset.clone());
    }
    let ds = dataset.open()?;
    let indices = stratified_subset(&ds.labels(), dataset.class_count, spec)?;
    let file = out_dir.join(format!(
        "subset-{}-{}-{}-seed{}.txt",
        dataset.name,
        dataset.split,
        (spec.fraction * 1000.0).round() as u64,
        spec.seed
    ));
    write_index_file(&file, &indices)?;
    Ok(DatasetRef {
        index_file: Some(file),
        ..dataset.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cifar_like_labels() -> Vec<usize> {
        (0..50_000).map(|i| i % 100).collect()
    }

    fn spec(fraction: f64, seed: u64) -> SubsetSpec {
        SubsetSpec {
            fraction,
            stratified: true,
            seed,
        }
    }

    #[test]
    fn thirty_percent_of_cifar_train() {
        let labels = cifar_like_labels();
        let idx = stratified_subset(&labels, 100, &spec(0.3, 1)).unwrap();
        assert_eq!(idx.len(), 15_000);
        let mut counts = [0usize; 100];
        for &i in &idx {
            counts[labels[i]] += 1;
        }
        assert!(counts.iter().all(|&c| c == 150));
    }

    #[test]
    fn full_fraction_is_identity() {
        let labels = cifar_like_labels();
        let idx = stratified_subset(&labels, 100, &spec(1.0, 9)).unwrap();
        assert_eq!(idx, (0..labels.len()).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_indices() {
        let labels = cifar_like_labels();
        let a = stratified_subset(&labels, 100, &spec(0.6, 5)).unwrap();
        let b = stratified_subset(&labels, 100, &spec(0.6, 5)).unwrap();
        let c = stratified_subset(&labels, 100, &spec(0.6, 6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn tiny_fraction_names_the_class() {
        let labels: Vec<usize> = (0..30).map(|i| if i < 25 { 0 } else { 1 }).collect();
        let err = stratified_subset(&labels, 2, &spec(0.1, 0)).unwrap_err();
        assert!(err.to_string().contains("class 1"), "{err}");
    }

    #[test]
    fn unbalanced_classes_keep_proportions() {
        let labels: Vec<usize> = (0..1000).map(|i| if i % 10 < 7 { 0 } else { i % 3 }).collect();
        let mut per_class = [0usize; 3];
        labels.iter().for_each(|&y| per_class[y] += 1);
        let idx = stratified_subset(&labels, 3, &spec(0.3, 2)).unwrap();
        let mut got = [0usize; 3];
        idx.iter().for_each(|&i| got[labels[i]] += 1);
        for c in 0..3 {
            let want = 0.3 * per_class[c] as f64;
            assert!((got[c] as f64 - want).abs() <= 1.0, "class {c}: {} vs {want}", got[c]);
        }
    }
}
