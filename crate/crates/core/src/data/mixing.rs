//! Batch-level Mixup and CutMix.

use ndarray::{s, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::losses::HardTargetBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixKind {
    None,
    Mixup,
    Cutmix,
}

/// Pasted region, half-open: rows `y0..y1`, columns `x0..x1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl CutBox {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    /// N×C×H×W
    pub images: Array4<f32>,
    pub targets: HardTargetBatch,
    pub lam: f64,
    pub mix_kind: MixKind,
    pub permutation: Vec<usize>,
    pub region: Option<CutBox>,
}

impl MixedBatch {
    pub fn unmixed(images: Array4<f32>, targets: HardTargetBatch) -> Self {
        let n = images.len_of(Axis(0));
        Self {
            images,
            targets,
            lam: 1.0,
            mix_kind: MixKind::None,
            permutation: (0..n).collect(),
            region: None,
        }
    }
}

fn check(images: &Array4<f32>, targets: &HardTargetBatch, perm: &[usize]) -> Result<()> {
    let n = images.len_of(Axis(0));
    if targets.len() != n || perm.len() != n {
        return Err(Error::Shape(format!(
            "batch of {n} images with {} targets and permutation of {}",
            targets.len(),
            perm.len()
        )));
    }
    Ok(())
}

fn mix_targets(targets: &HardTargetBatch, classes: usize, lam: f64, perm: &[usize]) -> Result<HardTargetBatch> {
    let w = targets.to_weights(classes)?;
    let mut out = Array2::zeros(w.raw_dim());
    for (i, &j) in perm.iter().enumerate() {
        let row = &w.row(i) * lam + &w.row(j) * (1.0 - lam);
        out.row_mut(i).assign(&row);
    }
    Ok(HardTargetBatch::Weights(out))
}

/// Mixup with a given coefficient and pairing: `λ·x + (1−λ)·x[perm]`.
pub fn mixup_with(
    images: &Array4<f32>,
    targets: &HardTargetBatch,
    classes: usize,
    lam: f64,
    perm: &[usize],
) -> Result<MixedBatch> {
    check(images, targets, perm)?;
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::Config(format!("mixing coefficient {lam} outside [0, 1]")));
    }
    let mut out = images.clone();
    let (a, b) = (lam as f32, (1.0 - lam) as f32);
    for (i, &j) in perm.iter().enumerate() {
        let mixed = &images.index_axis(Axis(0), i) * a + &images.index_axis(Axis(0), j) * b;
        out.index_axis_mut(Axis(0), i).assign(&mixed);
    }
    Ok(MixedBatch {
        images: out,
        targets: mix_targets(targets, classes, lam, perm)?,
        lam,
        mix_kind: MixKind::Mixup,
        permutation: perm.to_vec(),
        region: None,
    })
}

fn permutation<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

fn draw_lam<R: Rng>(alpha: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("mixing alpha {alpha}: {e}")))?;
    Ok(beta.sample(rng))
}

/// `alpha = 0` disables mixing.
pub fn apply_mixup<R: Rng>(
    images: &Array4<f32>,
    targets: &HardTargetBatch,
    classes: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<MixedBatch> {
    if alpha < 0.0 {
        return Err(Error::Config(format!("mixup alpha {alpha} < 0")));
    }
    if alpha == 0.0 {
        return Ok(MixedBatch::unmixed(images.clone(), targets.clone()));
    }
    let lam = draw_lam(alpha, rng)?;
    let perm = permutation(images.len_of(Axis(0)), rng);
    mixup_with(images, targets, classes, lam, &perm)
}

/// Pastes `region` of sample `perm[i]` into sample `i`; the target weight is
/// `1 − area/(H·W)`.
pub fn cutmix_with_box(
    images: &Array4<f32>,
    targets: &HardTargetBatch,
    classes: usize,
    region: CutBox,
    perm: &[usize],
) -> Result<MixedBatch> {
    check(images, targets, perm)?;
    let (_, _, h, w) = images.dim();
    if region.y0 > region.y1 || region.x0 > region.x1 || region.y1 > h || region.x1 > w {
        return Err(Error::Shape(format!("cut region {region:?} outside {h}×{w} image")));
    }
    let lam = 1.0 - region.area() as f64 / (h * w) as f64;
    let mut out = images.clone();
    for (i, &j) in perm.iter().enumerate() {
        let patch = images.slice(s![j, .., region.y0..region.y1, region.x0..region.x1]);
        out.slice_mut(s![i, .., region.y0..region.y1, region.x0..region.x1])
            .assign(&patch);
    }
    Ok(MixedBatch {
        images: out,
        targets: mix_targets(targets, classes, lam, perm)?,
        lam,
        mix_kind: MixKind::Cutmix,
        permutation: perm.to_vec(),
        region: Some(region),
    })
}

/// Box with side ratio `sqrt(1 − λ)` around a uniform center, clipped.
pub fn random_box<R: Rng>(h: usize, w: usize, lam: f64, rng: &mut R) -> CutBox {
    let ratio = (1.0 - lam).sqrt();
    let (ch, cw) = ((h as f64 * ratio) as usize, (w as f64 * ratio) as usize);
    let cy = rng.random_range(0..h) as isize;
    let cx = rng.random_range(0..w) as isize;
    let clip = |v: isize, hi: usize| v.clamp(0, hi as isize) as usize;
    CutBox {
        y0: clip(cy - (ch / 2) as isize, h),
        y1: clip(cy + (ch / 2) as isize, h),
        x0: clip(cx - (cw / 2) as isize, w),
        x1: clip(cx + (cw / 2) as isize, w),
    }
}

pub fn apply_cutmix<R: Rng>(
    images: &Array4<f32>,
    targets: &HardTargetBatch,
    classes: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<MixedBatch> {
    if alpha < 0.0 {
        return Err(Error::Config(format!("cutmix alpha {alpha} < 0")));
    }
    if alpha == 0.0 {
        return Ok(MixedBatch::unmixed(images.clone(), targets.clone()));
    }
    let (n, _, h, w) = images.dim();
    let lam = draw_lam(alpha, rng)?;
    let region = random_box(h, w, lam, rng);
    let perm = permutation(n, rng);
    cutmix_with_box(images, targets, classes, region, &perm)
}

/// Recipe-level mixing: with both enabled, each batch uses one of them with
/// probability 0.5.
pub fn apply_mixing<R: Rng>(
    images: &Array4<f32>,
    targets: &HardTargetBatch,
    classes: usize,
    mixup_alpha: f64,
    cutmix_alpha: f64,
    rng: &mut R,
) -> Result<MixedBatch> {
    match (mixup_alpha > 0.0, cutmix_alpha > 0.0) {
        (false, false) => Ok(MixedBatch::unmixed(images.clone(), targets.clone())),
        (true, false) => apply_mixup(images, targets, classes, mixup_alpha, rng),
        (false, true) => apply_cutmix(images, targets, classes, cutmix_alpha, rng),
        (true, true) => {
            if rng.random_bool(0.5) {
                apply_cutmix(images, targets, classes, cutmix_alpha, rng)
            } else {
                apply_mixup(images, targets, classes, mixup_alpha, rng)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(n: usize, h: usize, w: usize) -> Array4<f32> {
        Array4::from_shape_fn((n, 3, h, w), |(i, c, y, x)| (i * 1000 + c * 100 + y * 10 + x) as f32)
    }

    #[test]
    fn half_mix_of_two_classes() {
        let imgs = batch(2, 2, 2);
        let t = HardTargetBatch::Indices(vec![1, 3]);
        let m = mixup_with(&imgs, &t, 4, 0.5, &[1, 0]).unwrap();
        let w = m.targets.to_weights(4).unwrap();
        assert_eq!(w.row(0).to_vec(), vec![0.0, 0.5, 0.0, 0.5]);
    }

    #[test]
    fn quarter_region_gives_three_quarters() {
        let imgs = batch(2, 224, 224);
        let t = HardTargetBatch::Indices(vec![0, 1]);
        let b = CutBox { y0: 0, y1: 112, x0: 56, x1: 168 };
        let m = cutmix_with_box(&imgs, &t, 2, b, &[1, 0]).unwrap();
        assert_eq!(m.lam, 0.75);
        assert_eq!(m.images[[0, 0, 0, 56]], imgs[[1, 0, 0, 56]]);
        assert_eq!(m.images[[0, 0, 200, 0]], imgs[[0, 0, 200, 0]]);
    }

    #[test]
    fn full_region_swaps() {
        let imgs = batch(2, 4, 4);
        let t = HardTargetBatch::Indices(vec![0, 1]);
        let b = CutBox { y0: 0, y1: 4, x0: 0, x1: 4 };
        let m = cutmix_with_box(&imgs, &t, 2, b, &[1, 0]).unwrap();
        assert_eq!(m.lam, 0.0);
        assert_eq!(m.images.index_axis(Axis(0), 0), imgs.index_axis(Axis(0), 1));
    }

    #[test]
    fn alternation_uses_both() {
        let imgs = batch(4, 8, 8);
        let t = HardTargetBatch::Indices(vec![0, 1, 2, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kinds: Vec<MixKind> = (0..40)
            .map(|_| apply_mixing(&imgs, &t, 4, 0.2, 1.0, &mut rng).unwrap().mix_kind)
            .collect();
        assert!(kinds.contains(&MixKind::Mixup) && kinds.contains(&MixKind::Cutmix));
    }
}
