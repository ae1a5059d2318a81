//! Synthetic images whose class is a local pattern at a fixed place.
//!
//! Every class owns a binary `3×4×4` pattern and a location; an image of
//! class `c` is uniform noise with pattern `c` written over its location.
//! Patterns and locations depend only on the class count and image size, so
//! datasets drawn with different seeds share them.

use rand::Rng;

use super::Dataset;
use crate::rng::{seeded, stream};

/// Side of the square class pattern.
pub const STAMP: usize = 4;
const CHANNELS: usize = 3;
const PATTERN_SEED: u64 = 0x05EE_D0FC_1A55;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPattern {
    pub y: usize,
    pub x: usize,
    /// `[3, STAMP, STAMP]` values in `{0, 1}`.
    pub pixels: Vec<f32>,
}

/// Patterns at pairwise non-overlapping locations.
pub fn class_patterns(num_classes: usize, side: usize) -> Vec<ClassPattern> {
    assert!(side >= STAMP, "image side {side} smaller than the pattern");
    let mut rng = seeded(PATTERN_SEED ^ ((num_classes as u64) << 32) ^ side as u64);
    let mut out: Vec<ClassPattern> = Vec::with_capacity(num_classes);
    let free = |y: usize, x: usize, out: &[ClassPattern]| {
        out.iter()
            .all(|p| y + STAMP <= p.y || p.y + STAMP <= y || x + STAMP <= p.x || p.x + STAMP <= x)
    };
    let per_row = side / STAMP;
    let mut attempts = 0usize;
    let mut packed = false;
    while out.len() < num_classes {
        attempts += 1;
        // switch to a packed grid when random placement keeps colliding
        if !packed && attempts >= 10_000 {
            assert!(
                num_classes <= per_row * per_row,
                "{num_classes} classes do not fit on a {side}×{side} image"
            );
            packed = true;
            out.clear();
        }
        let (y, x) = if packed {
            let i = out.len();
            (i / per_row * STAMP, i % per_row * STAMP)
        } else {
            (rng.random_range(0..=side - STAMP), rng.random_range(0..=side - STAMP))
        };
        if !free(y, x, &out) {
            continue;
        }
        let pixels: Vec<f32> = (0..CHANNELS * STAMP * STAMP)
            .map(|_| f32::from(u8::from(rng.random_bool(0.5))))
            .collect();
        if out.iter().any(|p| p.pixels == pixels) {
            continue;
        }
        out.push(ClassPattern { y, x, pixels });
    }
    out
}

fn stamp(image: &mut [f32], side: usize, p: &ClassPattern) {
    for c in 0..CHANNELS {
        for dy in 0..STAMP {
            for dx in 0..STAMP {
                image[(c * side + p.y + dy) * side + p.x + dx] = p.pixels[(c * STAMP + dy) * STAMP + dx];
            }
        }
    }
}

/// `n` images of `3×32×32` with labels `i mod num_classes`.
pub fn synthetic_dataset(n: usize, num_classes: usize, seed: u64) -> Dataset {
    synthetic_dataset_sized(n, num_classes, 32, seed)
}

pub fn synthetic_dataset_sized(n: usize, num_classes: usize, side: usize, seed: u64) -> Dataset {
    let patterns = class_patterns(num_classes, side);
    let mut rng = stream(seed, "synthetic");
    let len = CHANNELS * side * side;
    let mut images = Vec::with_capacity(n * len);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % num_classes;
        let mut img: Vec<f32> = (0..len).map(|_| rng.random::<f32>()).collect();
        stamp(&mut img, side, &patterns[label]);
        images.extend_from_slice(&img);
        labels.push(label);
    }
    Dataset {
        images,
        labels,
        channels: CHANNELS,
        height: side,
        width: side,
        num_classes,
    }
}
