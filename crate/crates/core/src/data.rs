//! Labeled image sets, per-channel normalization and a synthetic generator.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::seeded;
use crate::{Error, Result, Tensor};

/// Images `[N, C, H, W]` with one class label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.shape().len() != 4 || images.batch_len() != labels.len() {
            return Err(Error::arg(
                "Dataset::new",
                alloc::format!(
                    "{} labels for images of shape {:?}",
                    labels.len(),
                    images.shape()
                ),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}

/// Per-channel affine normalization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: alloc::vec![0.0; channels],
            std: alloc::vec![1.0; channels],
        }
    }

    /// Mean and population standard deviation of each channel over all
    /// images and pixels. A constant channel gets std 1.
    pub fn fit(images: &Tensor) -> Self {
        let c = images.shape()[1];
        let plane = images.shape()[2] * images.shape()[3];
        let mut sum = alloc::vec![0.0; c];
        let mut count = alloc::vec![0usize; c];
        for (i, chunk) in images.data().chunks(plane).enumerate() {
            sum[i % c] += chunk.iter().sum::<f64>();
            count[i % c] += chunk.len();
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
        let mut var = alloc::vec![0.0; c];
        for (i, chunk) in images.data().chunks(plane).enumerate() {
            let m = mean[i % c];
            var[i % c] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        let std = var
            .iter()
            .zip(&count)
            .map(|(v, &n)| {
                let s = libm::sqrt(v / n as f64);
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Normalization { mean, std }
    }

    fn apply(&self, images: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let c = images.shape()[1];
        let plane = images.shape()[2] * images.shape()[3];
        Tensor::from_fn(images.shape(), |i| {
            let ch = (i / plane) % c;
            f(images.data()[i], self.mean[ch], self.std[ch])
        })
    }

    pub fn normalize(&self, images: &Tensor) -> Tensor {
        self.apply(images, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, images: &Tensor) -> Tensor {
        self.apply(images, |v, m, s| v * s + m)
    }
}

/// Smooth random images: per channel, a sum of three low-frequency
/// sinusoids min-max rescaled to `[0, 1]`.
///
/// Labels are drawn as consecutive shuffled runs of `0..classes`, so any
/// `classes` consecutive samples carry distinct labels.
pub fn synthetic(n: usize, channels: usize, size: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || size < 4 || channels == 0 || classes == 0 {
        return Err(Error::arg(
            "synthetic",
            "need n >= 1, size >= 4, channels >= 1, classes >= 1",
        ));
    }
    let mut rng = seeded(seed);
    let plane = size * size;
    let mut data = Vec::with_capacity(n * channels * plane);
    let tau = 2.0 * core::f64::consts::PI;
    for _ in 0..n * channels {
        let mut values = alloc::vec![0.0; plane];
        for _ in 0..3 {
            let (fx, fy) = loop {
                let fx: i32 = rng.random_range(-2..=2);
                let fy: i32 = rng.random_range(-2..=2);
                if fx != 0 || fy != 0 {
                    break (fx, fy);
                }
            };
            let amp: f64 = rng.random_range(0.3..1.0);
            let phase: f64 = rng.random_range(0.0..tau);
            for y in 0..size {
                for x in 0..size {
                    let t = tau * (fx as f64 * x as f64 + fy as f64 * y as f64) / size as f64;
                    values[y * size + x] += amp * libm::sin(t + phase);
                }
            }
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        data.extend(values.iter().map(|v| (v - lo) / span));
    }
    let mut labels = Vec::with_capacity(n);
    let mut run: Vec<usize> = (0..classes).collect();
    while labels.len() < n {
        run.shuffle(&mut rng);
        labels.extend(run.iter().copied().take(n - labels.len()));
    }
    Dataset::new(Tensor::new(alloc::vec![n, channels, size, size], data)?, labels, classes)
}
