//! Datasets, per-channel normalization, shuffling, augmentation and batching.

mod cifar;
mod synthetic;

pub use cifar::{load_cifar10, write_cifar10_records, Split, CIFAR_CLASSES, CIFAR_RECORD_BYTES, CIFAR_SIDE};
pub use synthetic::{class_patterns, synthetic_dataset, synthetic_dataset_sized, ClassPattern, STAMP};

use std::path::PathBuf;
use std::sync::mpsc;
use std::thread;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, stream, Prng};
use crate::tensor::Tensor;

/// Images stored contiguously as `[n, channels, height, width]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

/// One image `[channels, height, width]` with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn sample(&self, i: usize) -> Sample {
        Sample {
            image: Tensor::new(vec![self.channels, self.height, self.width], self.image(i).to_vec())
                .expect("dataset layout"),
            label: self.labels[i],
        }
    }

    /// The first `n` samples.
    pub fn subset(&self, n: usize) -> Result<Dataset> {
        if n > self.len() {
            return Err(Error::config(
                "subset_size",
                format!("{n} exceeds the {} available samples", self.len()),
            ));
        }
        Ok(Dataset {
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..*self
        })
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Per-channel mean and standard deviation used for `(x − mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    /// Population statistics over every pixel of `data`.
    pub fn compute(data: &Dataset) -> ChannelStats {
        let hw = data.height * data.width;
        let mut sum = vec![0.0f64; data.channels];
        let mut sq = vec![0.0f64; data.channels];
        for img in data.images.chunks_exact(data.image_len()) {
            for (c, plane) in img.chunks_exact(hw).enumerate() {
                for &v in plane {
                    sum[c] += f64::from(v);
                    sq[c] += f64::from(v) * f64::from(v);
                }
            }
        }
        let n = (data.len() * hw).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n - m * m).max(0.0).sqrt().max(1e-6)) as f32)
            .collect();
        ChannelStats {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }

    pub fn identity(channels: usize) -> ChannelStats {
        ChannelStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::config(
                "normalization",
                format!("expected {channels} channel values"),
            ));
        }
        if self.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::config("normalization.std", "must be positive"));
        }
        Ok(())
    }

    /// Normalizes one `[channels, h, w]` image in place.
    pub fn normalize(&self, image: &mut [f32]) {
        let hw = image.len() / self.mean.len();
        for (c, plane) in image.chunks_exact_mut(hw).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            plane.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }

    pub fn denormalize(&self, image: &mut [f32]) {
        let hw = image.len() / self.mean.len();
        for (c, plane) in image.chunks_exact_mut(hw).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            plane.iter_mut().for_each(|v| *v = *v * s + m);
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    #[default]
    None,
    /// Horizontal flip with probability 1/2, then a random crop from the
    /// image zero-padded by [`CROP_PAD`] pixels per side.
    FlipCrop,
}

pub const CROP_PAD: usize = 4;

/// Mirrors a `[channels, h, w]` image left to right.
pub fn hflip(image: &mut [f32], width: usize) {
    for row in image.chunks_exact_mut(width) {
        row.reverse();
    }
}

/// Shifts the image by `(dy, dx)` within a zero border of `pad` pixels:
/// output pixel `(y, x)` reads padded pixel `(y + dy, x + dx)`.
pub fn pad_crop(image: &[f32], channels: usize, h: usize, w: usize, pad: usize, dy: usize, dx: usize) -> Vec<f32> {
    let mut out = vec![0.0; image.len()];
    for c in 0..channels {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy as usize >= h {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx >= 0 && (sx as usize) < w {
                    out[(c * h + y) * w + x] = image[(c * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, channels, height, width]`, normalized.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// One epoch of batches in a seeded order. The final batch may be short.
pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    augmentation: Augmentation,
    stats: &'a ChannelStats,
    rng: Prng,
}

/// Batches over `data`; `shuffle_seed` selects a Fisher–Yates order,
/// `None` keeps dataset order.
pub fn batches<'a>(
    data: &'a Dataset,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    augmentation: Augmentation,
    stats: &'a ChannelStats,
) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    stats.validate(data.channels)?;
    let order = match shuffle_seed {
        Some(s) => crate::rng::permutation(&mut seeded(s), data.len()),
        None => (0..data.len()).collect(),
    };
    Ok(Batches {
        data,
        order,
        pos: 0,
        batch_size,
        augmentation,
        stats,
        rng: stream(shuffle_seed.unwrap_or(0), "augment"),
    })
}

impl Batches<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let d = self.data;
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let n = d.image_len();
        let mut images = Vec::with_capacity(idx.len() * n);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let mut img = d.image(i).to_vec();
            if self.augmentation == Augmentation::FlipCrop {
                if self.rng.random_bool(0.5) {
                    hflip(&mut img, d.width);
                }
                let dy = self.rng.random_range(0..=2 * CROP_PAD);
                let dx = self.rng.random_range(0..=2 * CROP_PAD);
                img = pad_crop(&img, d.channels, d.height, d.width, CROP_PAD, dy, dx);
            }
            self.stats.normalize(&mut img);
            images.extend_from_slice(&img);
            labels.push(d.labels[i]);
        }
        let images = Tensor::new(vec![idx.len(), d.channels, d.height, d.width], images).expect("batch layout");
        Some(Batch { images, labels })
    }
}

/// Runs `consume` on every batch while a worker thread prepares the next
/// ones. Batches arrive in the same order as from the iterator itself.
pub fn prefetch<I, F, E>(iter: I, depth: usize, mut consume: F) -> std::result::Result<(), E>
where
    I: Iterator<Item = Batch> + Send,
    F: FnMut(Batch) -> std::result::Result<(), E>,
{
    thread::scope(|s| {
        let (tx, rx) = mpsc::sync_channel(depth.max(1));
        s.spawn(move || {
            for b in iter {
                if tx.send(b).is_err() {
                    break;
                }
            }
        });
        for b in rx {
            consume(b)?;
        }
        Ok(())
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Cifar10Binary,
    Synthetic,
}

/// Where training and validation data come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// CIFAR-10 directory; the CLI `--data` flag overrides it.
    #[serde(default)]
    pub root: Option<PathBuf>,
    /// Training samples: the first `n` CIFAR-10 records, or the synthetic count.
    #[serde(default)]
    pub train_size: Option<usize>,
    /// Validation samples: taken from the CIFAR-10 test split or drawn synthetically.
    #[serde(default)]
    pub val_size: Option<usize>,
    /// Class count of the synthetic dataset.
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// Defaults to statistics of the full training split.
    #[serde(default)]
    pub normalization: Option<ChannelStats>,
    #[serde(default)]
    pub augmentation: Augmentation,
    /// Seed of the synthetic draw.
    #[serde(default)]
    pub seed: u64,
}

fn default_classes() -> usize {
    10
}

/// Loaded training and validation sets with the normalization to apply.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub val: Dataset,
    pub stats: ChannelStats,
    /// Human-readable origin of the data.
    pub source: String,
}

impl DatasetSpec {
    pub fn synthetic(train_size: usize, val_size: usize, num_classes: usize, seed: u64) -> Self {
        DatasetSpec {
            kind: DatasetKind::Synthetic,
            root: None,
            train_size: Some(train_size),
            val_size: Some(val_size),
            num_classes,
            normalization: None,
            augmentation: Augmentation::None,
            seed,
        }
    }

    pub fn cifar10(root: impl Into<PathBuf>) -> Self {
        DatasetSpec {
            kind: DatasetKind::Cifar10Binary,
            root: Some(root.into()),
            train_size: None,
            val_size: None,
            num_classes: CIFAR_CLASSES,
            normalization: None,
            augmentation: Augmentation::None,
            seed: 0,
        }
    }

    pub fn prepare(&self) -> Result<PreparedData> {
        let (train, val, source) = match self.kind {
            DatasetKind::Synthetic => {
                let (n, v) = (self.train_size.unwrap_or(2000), self.val_size.unwrap_or(500));
                if self.num_classes == 0 {
                    return Err(Error::config("data.num_classes", "must be at least 1"));
                }
                let train = synthetic_dataset(n, self.num_classes, self.seed);
                let val = synthetic_dataset(v, self.num_classes, self.seed ^ 0x7A11_D47E);
                (
                    train,
                    val,
                    format!("synthetic ({n} train / {v} val, seed {})", self.seed),
                )
            }
            DatasetKind::Cifar10Binary => {
                let root = self
                    .root
                    .as_ref()
                    .ok_or_else(|| Error::config("data.root", "CIFAR-10 needs a data directory"))?;
                let train = load_cifar10(root, Split::Train)?;
                let test = load_cifar10(root, Split::Test)?;
                (train, test, format!("CIFAR-10 binary at {}", root.display()))
            }
        };
        let stats = match &self.normalization {
            Some(s) => s.clone(),
            None => ChannelStats::compute(&train),
        };
        stats.validate(train.channels)?;
        let train = match self.train_size {
            Some(n) if self.kind == DatasetKind::Cifar10Binary => train.subset(n)?,
            _ => train,
        };
        let val = match self.val_size {
            Some(n) if self.kind == DatasetKind::Cifar10Binary => val.subset(n)?,
            _ => val,
        };
        Ok(PreparedData {
            train,
            val,
            stats,
            source,
        })
    }
}
