//! CIFAR-10 binary format: records of one label byte followed by 3072
//! pixel bytes (red, green, blue planes, each 32×32 row-major).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn files(self) -> Vec<String> {
        match self {
            Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            Split::Test => vec!["test_batch.bin".to_string()],
        }
    }
}

/// The directory holding the batch files: `root` itself or its
/// `cifar-10-batches-bin` subdirectory.
fn batch_dir(root: &Path, split: Split) -> PathBuf {
    let nested = root.join("cifar-10-batches-bin");
    if !root.join(&split.files()[0]).exists() && nested.join(&split.files()[0]).exists() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn parse_file(path: &Path, bytes: &[u8], images: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<()> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!(
                "length {} is not a positive multiple of the {CIFAR_RECORD_BYTES}-byte record size",
                bytes.len()
            ),
        });
    }
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("record {i} has label byte {label}, expected 0..=9"),
            });
        }
        labels.push(label);
        images.extend(rec[1..].iter().map(|&b| f32::from(b) / 255.0));
    }
    Ok(())
}

/// Loads every record of the split (5 training files or the test file).
pub fn load_cifar10(root: &Path, split: Split) -> Result<Dataset> {
    let dir = batch_dir(root, split);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for name in split.files() {
        let path = dir.join(name);
        let bytes =
            fs::read(&path).map_err(|e| std::io::Error::new(e.kind(), format!("reading {}: {e}", path.display())))?;
        parse_file(&path, &bytes, &mut images, &mut labels)?;
    }
    Ok(Dataset {
        images,
        labels,
        channels: 3,
        height: CIFAR_SIDE,
        width: CIFAR_SIDE,
        num_classes: CIFAR_CLASSES,
    })
}

/// Writes `data` (3×32×32, labels < 10) as one CIFAR-10 binary file,
/// quantizing pixels to `round(255·v)`.
pub fn write_cifar10_records(path: &Path, data: &Dataset) -> Result<()> {
    if data.channels != 3 || data.height != CIFAR_SIDE || data.width != CIFAR_SIDE {
        return Err(Error::config("dataset", "CIFAR-10 records hold 3×32×32 images"));
    }
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD_BYTES);
    for i in 0..data.len() {
        let label = u8::try_from(data.labels[i])
            .ok()
            .filter(|&l| usize::from(l) < CIFAR_CLASSES)
            .ok_or_else(|| Error::config("labels", format!("label {} out of range", data.labels[i])))?;
        out.push(label);
        out.extend(data.image(i).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    fs::write(path, out)?;
    Ok(())
}
