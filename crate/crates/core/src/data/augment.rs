//! Per-sample augmentation pipelines built from a training recipe.

use image::imageops::{self, FilterType};
use image::RgbImage;
use ndarray::{s, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::dataset::DatasetRef;
use super::ops;
use crate::config::TrainingRecipe;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AugOp {
    AutoContrast,
    Equalize,
    Invert,
    Rotate,
    Posterize,
    Solarize,
    SolarizeAdd,
    Color,
    Contrast,
    Brightness,
    Sharpness,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
}

pub const RAND_AUGMENT_OPS: [AugOp; 15] = [
    AugOp::AutoContrast,
    AugOp::Equalize,
    AugOp::Invert,
    AugOp::Rotate,
    AugOp::Posterize,
    AugOp::Solarize,
    AugOp::SolarizeAdd,
    AugOp::Color,
    AugOp::Contrast,
    AugOp::Brightness,
    AugOp::Sharpness,
    AugOp::ShearX,
    AugOp::ShearY,
    AugOp::TranslateX,
    AugOp::TranslateY,
];

pub const MAX_LEVEL: f32 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AutoAugmentPolicy {
    Cifar10,
    ImageNet,
}

type SubPolicy = [(AugOp, f64, u8); 2];

// (op, probability, magnitude bin in 0..=9)
const CIFAR10_POLICY: [SubPolicy; 25] = {
    use AugOp::*;
    [
        [(Invert, 0.1, 0), (Contrast, 0.2, 6)],
        [(Rotate, 0.7, 2), (TranslateX, 0.3, 9)],
        [(Sharpness, 0.8, 1), (Sharpness, 0.9, 3)],
        [(ShearY, 0.5, 8), (TranslateY, 0.7, 9)],
        [(AutoContrast, 0.5, 0), (Equalize, 0.9, 0)],
        [(ShearY, 0.2, 7), (Posterize, 0.3, 7)],
        [(Color, 0.4, 3), (Brightness, 0.6, 7)],
        [(Sharpness, 0.3, 9), (Brightness, 0.7, 9)],
        [(Equalize, 0.6, 0), (Equalize, 0.5, 0)],
        [(Contrast, 0.6, 7), (Sharpness, 0.6, 5)],
        [(Color, 0.7, 7), (TranslateX, 0.5, 8)],
        [(Equalize, 0.3, 0), (AutoContrast, 0.4, 0)],
        [(TranslateY, 0.4, 3), (Sharpness, 0.2, 6)],
        [(Brightness, 0.9, 6), (Color, 0.2, 8)],
        [(Solarize, 0.5, 2), (Invert, 0.0, 0)],
        [(Equalize, 0.2, 0), (AutoContrast, 0.6, 0)],
        [(Equalize, 0.2, 0), (Equalize, 0.6, 0)],
        [(Color, 0.9, 9), (Equalize, 0.6, 0)],
        [(AutoContrast, 0.8, 0), (Solarize, 0.2, 8)],
        [(Brightness, 0.1, 3), (Color, 0.7, 0)],
        [(Solarize, 0.4, 5), (AutoContrast, 0.9, 0)],
        [(TranslateY, 0.9, 9), (TranslateY, 0.7, 9)],
        [(AutoContrast, 0.9, 0), (Solarize, 0.4, 3)],
        [(Equalize, 0.8, 0), (Invert, 0.1, 0)],
        [(TranslateY, 0.7, 9), (AutoContrast, 0.9, 0)],
    ]
};

const IMAGENET_POLICY: [SubPolicy; 25] = {
    use AugOp::*;
    [
        [(Posterize, 0.4, 8), (Rotate, 0.6, 9)],
        [(Solarize, 0.6, 5), (AutoContrast, 0.6, 0)],
        [(Equalize, 0.8, 0), (Equalize, 0.6, 0)],
        [(Posterize, 0.6, 7), (Posterize, 0.6, 6)],
        [(Equalize, 0.4, 0), (Solarize, 0.2, 4)],
        [(Equalize, 0.4, 0), (Rotate, 0.8, 8)],
        [(Solarize, 0.6, 3), (Equalize, 0.6, 0)],
        [(Posterize, 0.8, 5), (Equalize, 1.0, 0)],
        [(Rotate, 0.2, 3), (Solarize, 0.6, 8)],
        [(Equalize, 0.6, 0), (Posterize, 0.4, 6)],
        [(Rotate, 0.8, 8), (Color, 0.4, 0)],
        [(Rotate, 0.4, 9), (Equalize, 0.6, 0)],
        [(Equalize, 0.0, 0), (Equalize, 0.8, 0)],
        [(Invert, 0.6, 0), (Equalize, 1.0, 0)],
        [(Color, 0.6, 4), (Contrast, 1.0, 8)],
        [(Rotate, 0.8, 8), (Color, 1.0, 2)],
        [(Color, 0.8, 8), (Solarize, 0.8, 7)],
        [(Sharpness, 0.4, 7), (Invert, 0.6, 0)],
        [(ShearX, 0.6, 5), (Equalize, 1.0, 0)],
        [(Color, 0.4, 0), (Equalize, 0.6, 0)],
        [(Equalize, 0.4, 0), (Solarize, 0.2, 4)],
        [(Solarize, 0.6, 5), (AutoContrast, 0.6, 0)],
        [(Invert, 0.6, 0), (Equalize, 1.0, 0)],
        [(Color, 0.6, 4), (Contrast, 1.0, 8)],
        [(Equalize, 0.8, 0), (Equalize, 0.6, 0)],
    ]
};

impl AutoAugmentPolicy {
    /// CIFAR policy for small images, ImageNet policy otherwise.
    pub fn for_resolution(resolution: u32) -> Self {
        if resolution <= 64 {
            AutoAugmentPolicy::Cifar10
        } else {
            AutoAugmentPolicy::ImageNet
        }
    }

    fn table(self) -> &'static [SubPolicy; 25] {
        match self {
            AutoAugmentPolicy::Cifar10 => &CIFAR10_POLICY,
            AutoAugmentPolicy::ImageNet => &IMAGENET_POLICY,
        }
    }
}

fn signed<R: Rng>(v: f32, rng: &mut R) -> f32 {
    if rng.random_bool(0.5) {
        -v
    } else {
        v
    }
}

/// Applies `op` at strength `s ∈ [0, 1]` of its range.
fn apply_op<R: Rng>(img: &RgbImage, op: AugOp, s: f32, posterize_bits: u8, rng: &mut R) -> RgbImage {
    let size = img.width().min(img.height()) as f32;
    match op {
        AugOp::AutoContrast => ops::autocontrast(img),
        AugOp::Equalize => ops::equalize(img),
        AugOp::Invert => ops::invert(img),
        AugOp::Rotate => ops::rotate(img, signed(30.0 * s, rng)),
        AugOp::Posterize => ops::posterize(img, posterize_bits),
        AugOp::Solarize => ops::solarize(img, (256.0 * (1.0 - s)).round() as u16),
        AugOp::SolarizeAdd => ops::solarize_add(img, (110.0 * s) as i32),
        AugOp::Color => ops::color(img, 1.0 + signed(0.9 * s, rng)),
        AugOp::Contrast => ops::contrast(img, 1.0 + signed(0.9 * s, rng)),
        AugOp::Brightness => ops::brightness(img, 1.0 + signed(0.9 * s, rng)),
        AugOp::Sharpness => ops::sharpness(img, 1.0 + signed(0.9 * s, rng)),
        AugOp::ShearX => ops::shear_x(img, signed(0.3 * s, rng)),
        AugOp::ShearY => ops::shear_y(img, signed(0.3 * s, rng)),
        AugOp::TranslateX => ops::translate(img, signed(0.45 * s * size, rng), 0.0),
        AugOp::TranslateY => ops::translate(img, 0.0, signed(0.45 * s * size, rng)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Transform {
    RandomResizedCrop { size: u32, scale: (f64, f64), ratio: (f64, f64) },
    /// Zero-pad by `padding` then crop `size` at a random offset.
    PadRandomCrop { size: u32, padding: u32 },
    /// Resize the shorter side to `size` (bicubic).
    Resize { size: u32 },
    CenterCrop { size: u32 },
    HorizontalFlip { p: f64 },
    RandAugment { ops: usize, magnitude: u32, probability: f64 },
    AutoAugment { policy: AutoAugmentPolicy },
    Normalize { mean: [f32; 3], std: [f32; 3] },
    RandomErasing { p: f64 },
}

impl Transform {
    pub fn is_random(&self) -> bool {
        !matches!(
            self,
            Transform::Resize { .. } | Transform::CenterCrop { .. } | Transform::Normalize { .. }
        )
    }
}

pub fn build_augmentation(recipe: &TrainingRecipe, dataset: &DatasetRef, train: bool) -> Pipeline {
    let size = recipe.student_resolution;
    let mut t = Vec::new();
    if !train {
        let resize = (size as f64 / dataset.crop_pct).floor() as u32;
        t.push(Transform::Resize { size: resize });
        t.push(Transform::CenterCrop { size });
        t.push(Transform::Normalize { mean: dataset.mean, std: dataset.std });
        return Pipeline { transforms: t };
    }
    if recipe.random_resized_crop {
        t.push(Transform::RandomResizedCrop {
            size,
            scale: (0.08, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
        });
    } else if recipe.random_crop_padding > 0 {
        t.push(Transform::PadRandomCrop { size, padding: recipe.random_crop_padding });
    } else {
        t.push(Transform::Resize { size });
        t.push(Transform::CenterCrop { size });
    }
    if recipe.hflip {
        t.push(Transform::HorizontalFlip { p: 0.5 });
    }
    if let Some(ra) = &recipe.rand_augment {
        t.push(Transform::RandAugment {
            ops: 2,
            magnitude: ra.magnitude,
            probability: ra.probability,
        });
    } else if recipe.auto_augment {
        t.push(Transform::AutoAugment { policy: AutoAugmentPolicy::for_resolution(size) });
    }
    t.push(Transform::Normalize { mean: dataset.mean, std: dataset.std });
    if recipe.random_erasing_prob > 0.0 {
        t.push(Transform::RandomErasing { p: recipe.random_erasing_prob });
    }
    Pipeline { transforms: t }
}

/// Ordered transform list ending in a C×H×W float tensor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Pipeline {
    pub transforms: Vec<Transform>,
}

impl Pipeline {
    pub fn is_deterministic(&self) -> bool {
        !self.transforms.iter().any(Transform::is_random)
    }

    pub fn contains(&self, pred: impl Fn(&Transform) -> bool) -> bool {
        self.transforms.iter().any(pred)
    }

    pub fn apply<R: Rng>(&self, img: &RgbImage, rng: &mut R) -> Result<Array3<f32>> {
        let mut img = img.clone();
        let mut tensor: Option<Array3<f32>> = None;
        for t in &self.transforms {
            match (t, tensor.as_mut()) {
                (Transform::Normalize { mean, std }, None) => tensor = Some(normalize(&img, mean, std)),
                (Transform::RandomErasing { p }, Some(x)) => random_erasing(x, *p, rng),
                (_, None) => img = apply_image(t, img, rng),
                (t, Some(_)) => {
                    return Err(Error::Config(format!("{t:?} cannot follow normalization")));
                }
            }
        }
        tensor.ok_or_else(|| Error::Config("pipeline has no normalization stage".into()))
    }
}

fn apply_image<R: Rng>(t: &Transform, img: RgbImage, rng: &mut R) -> RgbImage {
    match *t {
        Transform::RandomResizedCrop { size, scale, ratio } => {
            let (x, y, w, h) = rrc_params(img.width(), img.height(), scale, ratio, rng);
            let crop = imageops::crop_imm(&img, x, y, w, h).to_image();
            imageops::resize(&crop, size, size, FilterType::Triangle)
        }
        Transform::PadRandomCrop { size, padding } => {
            let img = if img.width() != size || img.height() != size {
                imageops::resize(&img, size, size, FilterType::CatmullRom)
            } else {
                img
            };
            let mut padded = RgbImage::new(size + 2 * padding, size + 2 * padding);
            imageops::replace(&mut padded, &img, padding as i64, padding as i64);
            let x = rng.random_range(0..=2 * padding);
            let y = rng.random_range(0..=2 * padding);
            imageops::crop_imm(&padded, x, y, size, size).to_image()
        }
        Transform::Resize { size } => {
            let (w, h) = img.dimensions();
            if w.min(h) == size {
                return img;
            }
            let (nw, nh) = if w <= h {
                (size, ((h as f64 * size as f64 / w as f64).round() as u32).max(1))
            } else {
                (((w as f64 * size as f64 / h as f64).round() as u32).max(1), size)
            };
            imageops::resize(&img, nw, nh, FilterType::CatmullRom)
        }
        Transform::CenterCrop { size } => {
            let (w, h) = img.dimensions();
            if w < size || h < size {
                return imageops::resize(&img, size, size, FilterType::CatmullRom);
            }
            let x = (w - size) / 2;
            let y = (h - size) / 2;
            imageops::crop_imm(&img, x, y, size, size).to_image()
        }
        Transform::HorizontalFlip { p } => {
            if rng.random_bool(p) {
                imageops::flip_horizontal(&img)
            } else {
                img
            }
        }
        Transform::RandAugment { ops: n, magnitude, probability } => {
            let s = (magnitude as f32 / MAX_LEVEL).clamp(0.0, 1.0);
            let bits = 8 - (s * 4.0) as u8;
            let mut img = img;
            for _ in 0..n {
                let op = RAND_AUGMENT_OPS[rng.random_range(0..RAND_AUGMENT_OPS.len())];
                if rng.random_bool(probability) {
                    img = apply_op(&img, op, s, bits, rng);
                }
            }
            img
        }
        Transform::AutoAugment { policy } => {
            let table = policy.table();
            let sub = table[rng.random_range(0..table.len())];
            let mut img = img;
            for (op, p, bin) in sub {
                if rng.random_bool(p) {
                    let s = bin as f32 / 9.0;
                    let bits = 8 - (bin as f32 / 2.25).round() as u8;
                    img = apply_op(&img, op, s, bits, rng);
                }
            }
            img
        }
        Transform::Normalize { .. } | Transform::RandomErasing { .. } => img,
    }
}

/// Crop box `(x, y, w, h)` with area fraction in `scale` and aspect ratio in
/// `ratio` (log-uniform); falls back to a ratio-clamped center crop.
pub fn rrc_params<R: Rng>(
    width: u32,
    height: u32,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut R,
) -> (u32, u32, u32, u32) {
    let area = (width * height) as f64;
    let (lr0, lr1) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let aspect = rng.random_range(lr0..=lr1).exp();
        let w = (target * aspect).sqrt().round() as u32;
        let h = (target / aspect).sqrt().round() as u32;
        if w > 0 && h > 0 && w <= width && h <= height {
            let x = rng.random_range(0..=width - w);
            let y = rng.random_range(0..=height - h);
            return (x, y, w, h);
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (w, h) = if in_ratio < ratio.0 {
        (width, ((width as f64 / ratio.0).round() as u32).min(height))
    } else if in_ratio > ratio.1 {
        (((height as f64 * ratio.1).round() as u32).min(width), height)
    } else {
        (width, height)
    };
    ((width - w) / 2, (height - h) / 2, w, h)
}

pub fn normalize(img: &RgbImage, mean: &[f32; 3], std: &[f32; 3]) -> Array3<f32> {
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = (p.0[c] as f32 / 255.0 - mean[c]) / std[c];
        }
    }
    out
}

/// Erases one random rectangle (area 2%–33%, log-uniform aspect 0.3–3.3)
/// with per-pixel standard-normal noise.
pub fn random_erasing<R: Rng>(x: &mut Array3<f32>, p: f64, rng: &mut R) {
    if !rng.random_bool(p.clamp(0.0, 1.0)) {
        return;
    }
    let (_, h, w) = x.dim();
    let area = (h * w) as f64;
    let (lr0, lr1) = (0.3f64.ln(), (1.0f64 / 0.3).ln());
    for _ in 0..10 {
        let target = area * rng.random_range(0.02..=1.0 / 3.0);
        let aspect = rng.random_range(lr0..=lr1).exp();
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh > 0 && ew > 0 && eh < h && ew < w {
            let top = rng.random_range(0..=h - eh);
            let left = rng.random_range(0..=w - ew);
            for v in x.slice_mut(s![.., top..top + eh, left..left + ew]).iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            return;
        }
    }
}
