//! A small seeded texture corpus: oriented sinusoidal gratings plus
//! isotropic noise.

use std::f32::consts::PI;
use std::path::Path;

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::dataset::{Dataset, ImageRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub per_class: usize,
    pub size: usize,
    pub channels: usize,
    /// Number of sample ids cycled through within each class.
    pub groups: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { per_class: 40, size: 64, channels: 1, groups: 4, seed: 0 }
    }
}

pub const CLASS_NAMES: [&str; 4] = ["grating_000", "grating_045", "grating_090", "noise"];

fn grating(size: usize, angle_deg: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let theta = (angle_deg + rng.random_range(-5.0..5.0)) * PI / 180.0;
    let freq = rng.random_range(0.08f32..0.16);
    let phase = rng.random_range(0.0..2.0 * PI);
    let contrast = rng.random_range(0.25f32..0.4);
    let (c, s) = (theta.cos(), theta.sin());
    (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f32, (i % size) as f32);
            let n: f32 = rng.sample(StandardNormal);
            0.5 + contrast * (2.0 * PI * freq * (x * c + y * s) + phase).sin() + 0.05 * n
        })
        .collect()
}

fn isotropic_noise(size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let white: Vec<f32> = (0..size * size).map(|_| rng.sample(StandardNormal)).collect();
    // 3×3 box blur with wrap-around keeps the spectrum isotropic.
    let mut out = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for dy in [size - 1, 0, 1] {
                for dx in [size - 1, 0, 1] {
                    acc += white[((y + dy) % size) * size + (x + dx) % size];
                }
            }
            out[y * size + x] = 0.5 + 0.25 * acc / 3.0;
        }
    }
    out
}

/// Generates the corpus in memory. Records are ordered class by class.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.size == 0 || spec.channels == 0 || spec.per_class < 2 || spec.groups == 0 {
        return Err(Error::invalid("synthetic corpus needs a positive size, channels, groups and ≥ 2 images per class"));
    }
    let mut records = Vec::with_capacity(4 * spec.per_class);
    for (label, name) in CLASS_NAMES.iter().enumerate() {
        for i in 0..spec.per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream((label * spec.per_class + i) as u64);
            let plane = match label {
                0 => grating(spec.size, 0.0, &mut rng),
                1 => grating(spec.size, 45.0, &mut rng),
                2 => grating(spec.size, 90.0, &mut rng),
                _ => isotropic_noise(spec.size, &mut rng),
            };
            let plane: Vec<f32> = plane.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
            let data = plane.iter().copied().cycle().take(spec.channels * plane.len()).collect();
            let group = format!("s{}", i % spec.groups);
            records.push(ImageRecord {
                image: Tensor::new(vec![spec.channels, spec.size, spec.size], data)?,
                label: label as u32,
                path: format!("{name}/{i:03}_{group}.png"),
                group: Some(group),
            });
        }
    }
    Dataset::new(CLASS_NAMES.iter().map(|s| s.to_string()).collect(), records)
}

/// Writes the corpus as 8-bit grayscale PNGs under `root/<class>/`.
pub fn write_corpus(spec: &SyntheticSpec, root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let ds = generate(spec)?;
    for r in &ds.records {
        let path = root.join(&r.path);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let n = spec.size as u32;
        let img = GrayImage::from_fn(n, n, |x, y| {
            let v = r.image.data()[(y * n + x) as usize];
            Luma([(v * 255.0).round() as u8])
        });
        img.save(&path).map_err(|e| Error::Image { path: path.clone(), message: e.to_string() })?;
    }
    Ok(ds)
}
