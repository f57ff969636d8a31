//! Dataset references and on-disk readers.
//!
//! Supported layouts:
//! - CIFAR-100 binary archives: `<root>/<split>.bin`, records of
//!   1 coarse-label byte, 1 fine-label byte, then 3072 bytes of R, G and B planes.
//! - Folder-per-class image trees: `<root>/<split>/<class>/<image>`, classes
//!   sorted by name.
//! - Synthetic: procedurally generated class-conditional images, used for smoke
//!   runs where no real data is available.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DatasetKind {
    Cifar100,
    ImageFolder,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRef {
    pub name: String,
    pub kind: DatasetKind,
    pub root: PathBuf,
    pub split: String,
    pub class_count: usize,
    /// Native image side length in pixels.
    pub resolution: u32,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    /// Eval resize is `resolution / crop_pct` followed by a center crop.
    pub crop_pct: f64,
    /// Synthetic datasets only.
    #[serde(default)]
    pub samples_per_class: usize,
    /// Newline-delimited sample indices restricting the split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index_file: Option<PathBuf>,
}

pub const CIFAR100_MEAN: [f32; 3] = [0.5071, 0.4865, 0.4409];
pub const CIFAR100_STD: [f32; 3] = [0.2673, 0.2564, 0.2762];
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

impl DatasetRef {
    pub fn cifar100(root: impl Into<PathBuf>, split: &str) -> Self {
        Self {
            name: "cifar100".into(),
            kind: DatasetKind::Cifar100,
            root: root.into(),
            split: split.into(),
            class_count: 100,
            resolution: 32,
            mean: CIFAR100_MEAN,
            std: CIFAR100_STD,
            crop_pct: 1.0,
            samples_per_class: 0,
            index_file: None,
        }
    }

    pub fn imagenet(root: impl Into<PathBuf>, split: &str) -> Self {
        Self {
            name: "imagenet1k".into(),
            kind: DatasetKind::ImageFolder,
            root: root.into(),
            split: split.into(),
            class_count: 1000,
            resolution: 224,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            crop_pct: 0.875,
            samples_per_class: 0,
            index_file: None,
        }
    }

    /// Deterministic synthetic data. `root` carries no files; it only seeds
    /// the generator through the split name.
    pub fn synthetic(
        class_count: usize,
        samples_per_class: usize,
        resolution: u32,
        split: &str,
    ) -> Self {
        Self {
            name: "synthetic".into(),
            kind: DatasetKind::Synthetic,
            root: PathBuf::new(),
            split: split.into(),
            class_count,
            resolution,
            mean: [0.5, 0.5, 0.5],
            std: [0.25, 0.25, 0.25],
            crop_pct: 1.0,
            samples_per_class,
            index_file: None,
        }
    }

    /// Named presets usable from config files (`preset = "cifar100"`).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "cifar100" => Ok(Self::cifar100("data/cifar-100-binary", "train")),
            "imagenet" | "imagenet1k" => Ok(Self::imagenet("data/imagenet", "train")),
            "synthetic" => Ok(Self::synthetic(10, 20, 32, "train")),
            other => Err(Error::NotFound {
                kind: "dataset preset",
                name: other.to_string(),
                valid: "cifar100, imagenet, synthetic".into(),
            }),
        }
    }

    pub fn with_split(&self, split: &str) -> Self {
        Self {
            split: split.to_string(),
            index_file: None,
            ..self.clone()
        }
    }

    pub fn open(&self) -> Result<Box<dyn Dataset>> {
        if self.class_count < 2 {
            return Err(Error::Config(format!(
                "dataset `{}` needs class_count >= 2",
                self.name
            )));
        }
        let base: Box<dyn Dataset> = match self.kind {
            DatasetKind::Cifar100 => Box::new(Cifar100::open(&self.root, &self.split)?),
            DatasetKind::ImageFolder => Box::new(ImageFolder::open(
                &self.root.join(&self.split),
                Some(self.class_count),
            )?),
            DatasetKind::Synthetic => Box::new(Synthetic::new(
                self.class_count,
                self.samples_per_class,
                self.resolution,
                &self.split,
            )),
        };
        match &self.index_file {
            None => Ok(base),
            Some(path) => {
                let indices = read_index_file(path)?;
                Ok(Box::new(Subset::new(base, indices)?))
            }
        }
    }
}

/// Random-access labelled image source.
pub trait Dataset: Send + Sync {
    fn len(&self) -> usize;
    fn label(&self, index: usize) -> usize;
    fn image(&self, index: usize) -> Result<RgbImage>;
    fn class_count(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn labels(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }
}

pub const CIFAR_RECORD: usize = 2 + 3072;

pub struct Cifar100 {
    bytes: Vec<u8>,
}

impl Cifar100 {
    pub fn open(root: &Path, split: &str) -> Result<Self> {
        let path = root.join(format!("{split}.bin"));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Data(format!(
                "{}: size {} is not a positive multiple of {CIFAR_RECORD}",
                path.display(),
                bytes.len()
            )));
        }
        let ds = Self { bytes };
        if let Some(bad) = (0..ds.len()).find(|&i| ds.label(i) >= 100) {
            return Err(Error::Data(format!(
                "{}: record {bad} has fine label {} >= 100",
                path.display(),
                ds.label(bad)
            )));
        }
        Ok(ds)
    }

    /// Encodes one record in the archive layout.
    pub fn encode_record(coarse: u8, fine: u8, image: &RgbImage) -> Vec<u8> {
        assert_eq!(image.dimensions(), (32, 32));
        let mut out = Vec::with_capacity(CIFAR_RECORD);
        out.push(coarse);
        out.push(fine);
        for c in 0..3 {
            out.extend(image.pixels().map(|p| p.0[c]));
        }
        out
    }
}

impl Dataset for Cifar100 {
    fn len(&self) -> usize {
        self.bytes.len() / CIFAR_RECORD
    }

    fn label(&self, index: usize) -> usize {
        self.bytes[index * CIFAR_RECORD + 1] as usize
    }

    fn image(&self, index: usize) -> Result<RgbImage> {
        let rec = &self.bytes[index * CIFAR_RECORD + 2..(index + 1) * CIFAR_RECORD];
        let mut img = RgbImage::new(32, 32);
        for (i, p) in img.pixels_mut().enumerate() {
            p.0 = [rec[i], rec[1024 + i], rec[2048 + i]];
        }
        Ok(img)
    }

    fn class_count(&self) -> usize {
        100
    }
}

pub struct ImageFolder {
    files: Vec<(PathBuf, usize)>,
    classes: Vec<String>,
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg" | "bmp")
    )
}

impl ImageFolder {
    /// Classes are the sorted subdirectory names of `dir`. With `expected`
    /// set, the class count must match.
    pub fn open(dir: &Path, expected: Option<usize>) -> Result<Self> {
        let mut classes: Vec<String> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        classes.sort();
        let mut files = Vec::new();
        for (label, class) in classes.iter().enumerate() {
            let cdir = dir.join(class);
            let mut entries: Vec<PathBuf> = fs::read_dir(&cdir)
                .map_err(|e| Error::io(&cdir, e))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| is_image(p))
                .collect();
            entries.sort();
            files.extend(entries.into_iter().map(|p| (p, label)));
        }
        if let Some(k) = expected {
            if classes.len() != k && !classes.is_empty() {
                return Err(Error::Data(format!(
                    "{}: found {} class folders, expected {k}",
                    dir.display(),
                    classes.len()
                )));
            }
        }
        Ok(Self { files, classes })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }
}

impl Dataset for ImageFolder {
    fn len(&self) -> usize {
        self.files.len()
    }

    fn label(&self, index: usize) -> usize {
        self.files[index].1
    }

    fn image(&self, index: usize) -> Result<RgbImage> {
        let path = &self.files[index].0;
        let img = image::open(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(img.to_rgb8())
    }

    fn class_count(&self) -> usize {
        self.classes.len()
    }
}

/// Class-conditional noise-plus-pattern images: each class has a fixed colour
/// and stripe frequency, each sample adds its own jitter.
pub struct Synthetic {
    class_count: usize,
    per_class: usize,
    resolution: u32,
    split_salt: u64,
}

impl Synthetic {
    pub fn new(class_count: usize, per_class: usize, resolution: u32, split: &str) -> Self {
        let split_salt = split
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        Self {
            class_count,
            per_class,
            resolution,
            split_salt,
        }
    }
}

impl Dataset for Synthetic {
    fn len(&self) -> usize {
        self.class_count * self.per_class
    }

    fn label(&self, index: usize) -> usize {
        index % self.class_count
    }

    fn image(&self, index: usize) -> Result<RgbImage> {
        let label = self.label(index);
        let mut class_rng = ChaCha8Rng::seed_from_u64(label as u64 * 7919 + 17);
        let base: [f32; 3] = [
            class_rng.random_range(40.0..215.0),
            class_rng.random_range(40.0..215.0),
            class_rng.random_range(40.0..215.0),
        ];
        let freq = class_rng.random_range(1.0..6.0f32);
        let angle = class_rng.random_range(0.0..std::f32::consts::PI);
        let mut rng = ChaCha8Rng::seed_from_u64(self.split_salt ^ (index as u64).wrapping_mul(0x9e37_79b9));
        let phase = rng.random_range(0.0..std::f32::consts::TAU);
        let res = self.resolution;
        let (dx, dy) = (angle.cos(), angle.sin());
        let mut img = RgbImage::new(res, res);
        for (x, y, p) in img.enumerate_pixels_mut() {
            let t = (x as f32 * dx + y as f32 * dy) / res as f32;
            let wave = (t * freq * std::f32::consts::TAU + phase).sin() * 40.0;
            for c in 0..3 {
                let noise: f32 = rng.random_range(-25.0..25.0);
                p.0[c] = (base[c] + wave + noise).clamp(0.0, 255.0) as u8;
            }
        }
        Ok(img)
    }

    fn class_count(&self) -> usize {
        self.class_count
    }
}

/// View of a dataset restricted to an index list.
pub struct Subset {
    inner: Box<dyn Dataset>,
    indices: Vec<usize>,
}

impl Subset {
    pub fn new(inner: Box<dyn Dataset>, indices: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= inner.len()) {
            return Err(Error::Data(format!(
                "subset index {bad} out of range for dataset of {} samples",
                inner.len()
            )));
        }
        Ok(Self { inner, indices })
    }
}

impl Dataset for Subset {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn label(&self, index: usize) -> usize {
        self.inner.label(self.indices[index])
    }

    fn image(&self, index: usize) -> Result<RgbImage> {
        self.inner.image(self.indices[index])
    }

    fn class_count(&self) -> usize {
        self.inner.class_count()
    }
}

pub fn read_index_file(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim().parse::<usize>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn write_index_file(path: &Path, indices: &[usize]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = String::with_capacity(indices.len() * 6);
    for i in indices {
        text.push_str(&i.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_record_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let syn = Synthetic::new(100, 1, 32, "x");
        let mut bytes = Vec::new();
        for i in 0..5 {
            bytes.extend(Cifar100::encode_record(0, (i * 7) as u8, &syn.image(i).unwrap()));
        }
        fs::write(dir.path().join("train.bin"), bytes).unwrap();
        let ds = Cifar100::open(dir.path(), "train").unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.label(3), 21);
        assert_eq!(ds.image(2).unwrap(), syn.image(2).unwrap());
    }

    #[test]
    fn truncated_cifar_archive_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("test.bin"), vec![0u8; 100]).unwrap();
        assert!(matches!(
            Cifar100::open(dir.path(), "test"),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn synthetic_is_deterministic_and_split_dependent() {
        let a = Synthetic::new(4, 3, 16, "train");
        let b = Synthetic::new(4, 3, 16, "train");
        let c = Synthetic::new(4, 3, 16, "val");
        assert_eq!(a.image(5).unwrap(), b.image(5).unwrap());
        assert_ne!(a.image(5).unwrap(), c.image(5).unwrap());
        assert_eq!(a.labels(), vec![0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3]);
    }

    #[test]
    fn image_folder_sorted_classes() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["zebra", "ant"] {
            let cdir = dir.path().join(class);
            fs::create_dir_all(&cdir).unwrap();
            for i in 0..2 {
                RgbImage::new(8, 8).save(cdir.join(format!("{i}.png"))).unwrap();
            }
        }
        let ds = ImageFolder::open(dir.path(), Some(2)).unwrap();
        assert_eq!(ds.classes(), ["ant", "zebra"]);
        assert_eq!(ds.labels(), vec![0, 0, 1, 1]);
        assert_eq!(ds.image(3).unwrap().dimensions(), (8, 8));
    }

    #[test]
    fn index_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("idx.txt");
        write_index_file(&p, &[3, 1, 4]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "3\n1\n4\n");
        assert_eq!(read_index_file(&p).unwrap(), vec![3, 1, 4]);
    }
}
