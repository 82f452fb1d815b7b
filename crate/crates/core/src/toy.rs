//! Smooth synthetic images and noise models for desk-scale experiments.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::ImageTensor;
use crate::rng::derived_rng;

/// Random smooth image: a few low-frequency cosines on a mid-gray base with a
/// mild per-channel tint, kept inside `[0.05, 0.95]`.
pub fn smooth_image<R: Rng + ?Sized>(size: usize, channels: usize, rng: &mut R) -> ImageTensor {
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let fy = rng.random_range(0..=3) as f64;
            let fx = rng.random_range(0..=3) as f64;
            let amp = rng.random_range(0.04..0.1);
            let phase = rng.random_range(0.0..2.0 * PI);
            (fy, fx, amp, phase)
        })
        .collect();
    let base = rng.random_range(0.3..0.7);
    let gains: Vec<f64> = (0..channels).map(|_| rng.random_range(0.8..1.2)).collect();
    let s = size as f64;
    ImageTensor::from_fn(size, size, channels, |y, x, c| {
        let mut v = base;
        for &(fy, fx, amp, phase) in &waves {
            v += amp * (2.0 * PI * (fy * y as f64 + fx * x as f64) / s + phase).cos();
        }
        (v * gains[c]).clamp(0.05, 0.95) as f32
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    /// i.i.d. Gaussian with standard deviation `sigma / 255`.
    Gaussian { sigma: f64 },
    /// Variance `a · x + b` on the `[0, 1]` scale.
    PoissonGaussian { a: f64, b: f64 },
}

impl NoiseModel {
    pub fn apply<R: Rng + ?Sized>(&self, clean: &ImageTensor, rng: &mut R) -> ImageTensor {
        let mut out = clean.clone();
        for v in out.data_mut() {
            let std = match *self {
                NoiseModel::Gaussian { sigma } => sigma / 255.0,
                NoiseModel::PoissonGaussian { a, b } => (a * v.max(0.0) as f64 + b).sqrt(),
            };
            let n: f64 = StandardNormal.sample(rng);
            *v = (*v as f64 + std * n) as f32;
        }
        out
    }
}

/// Clean images drawn from stream `tag` of `seed`; image `i` depends only on `(seed, tag, i)`.
pub fn clean_set(seed: u64, tag: &str, count: usize, size: usize, channels: usize) -> Vec<ImageTensor> {
    (0..count).map(|i| smooth_image(size, channels, &mut derived_rng(seed, tag, i as u64))).collect()
}

/// Noisy counterparts of `clean`, with noise stream `tag`.
pub fn noisy_set(seed: u64, tag: &str, clean: &[ImageTensor], noise: NoiseModel) -> Vec<ImageTensor> {
    clean.iter().enumerate().map(|(i, x)| noise.apply(x, &mut derived_rng(seed, tag, i as u64))).collect()
}

/// Writes a toy unpaired training set and a paired validation set as 8-bit
/// PNGs under `root/{clean,noisy,val/clean,val/noisy}`.
pub fn write_toy_dataset(
    root: &Path,
    seed: u64,
    train: usize,
    val: usize,
    size: usize,
    channels: usize,
    noise: NoiseModel,
) -> Result<()> {
    let sets = [
        ("clean", clean_set(seed, "train_clean", train, size, channels)),
        ("noisy", noisy_set(seed, "train_noise", &clean_set(seed, "train_target", train, size, channels), noise)),
    ];
    let val_clean = clean_set(seed, "val_clean", val, size, channels);
    let val_noisy = noisy_set(seed, "val_noise", &val_clean, noise);
    let all = sets.into_iter().chain([("val/clean", val_clean), ("val/noisy", val_noisy)]);
    for (dir, images) in all {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| crate::CoreError::io(&d, e))?;
        for (i, img) in images.iter().enumerate() {
            img.save_png8(&d.join(format!("{i:04}.png")))?;
        }
    }
    Ok(())
}
