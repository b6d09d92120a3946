//! Dataset ingestion: CIFAR-10 binary batches and the synthetic generator.

use std::fs;
use std::path::Path;

use gradinv_core::data::{synthetic, Dataset, Normalization};
use gradinv_core::Tensor;

use crate::config::DatasetConfig;
use crate::Error;

pub const CIFAR_RECORDS: usize = 10_000;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
/// One label byte followed by the red, green and blue planes.
pub const CIFAR_RECORD_LEN: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_CLASSES: usize = 10;

/// Pixel-space images next to their normalized copies.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedData {
    /// Images in `[0, 1]`.
    pub raw: Dataset,
    /// What the model is trained on.
    pub normalized: Dataset,
    pub norm: Normalization,
}

impl LoadedData {
    fn from_raw(raw: Dataset, norm: Normalization) -> Result<Self, Error> {
        let normalized = Dataset::new(norm.normalize(&raw.images), raw.labels.clone(), raw.classes)?;
        Ok(LoadedData { raw, normalized, norm })
    }
}

/// Decodes a CIFAR-10 batch held in memory.
///
/// Normalization statistics come from every record in the buffer, not only
/// the selected ones.
pub fn parse_cifar10(bytes: &[u8], indices: Option<&[usize]>) -> Result<LoadedData, Error> {
    if bytes.len() != CIFAR_RECORDS * CIFAR_RECORD_LEN {
        return Err(Error::Data(format!(
            "cifar10 batch must be {} bytes, got {}",
            CIFAR_RECORDS * CIFAR_RECORD_LEN,
            bytes.len()
        )));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut sum = [0u64; 3];
    let mut sum_sq = [0u64; 3];
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        if record[0] as usize >= CIFAR_CLASSES {
            return Err(Error::Data(format!("record {i} has label byte {}", record[0])));
        }
        for (c, channel) in record[1..].chunks_exact(plane).enumerate() {
            for &p in channel {
                sum[c] += p as u64;
                sum_sq[c] += (p as u64) * (p as u64);
            }
        }
    }
    let n = (CIFAR_RECORDS * plane) as f64;
    let mut norm = Normalization::identity(3);
    for c in 0..3 {
        let mean = sum[c] as f64 / n / 255.0;
        let var = sum_sq[c] as f64 / n / (255.0 * 255.0) - mean * mean;
        norm.mean[c] = mean;
        norm.std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }

    let all: Vec<usize>;
    let indices = match indices {
        Some(i) => i,
        None => {
            all = (0..CIFAR_RECORDS).collect();
            &all
        }
    };
    let mut data = Vec::with_capacity(indices.len() * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        if i >= CIFAR_RECORDS {
            return Err(Error::Data(format!("index {i} outside 0..{CIFAR_RECORDS}")));
        }
        let record = &bytes[i * CIFAR_RECORD_LEN..(i + 1) * CIFAR_RECORD_LEN];
        labels.push(record[0] as usize);
        data.extend(record[1..].iter().map(|&p| p as f64 / 255.0));
    }
    let images = Tensor::new(vec![indices.len(), 3, CIFAR_SIDE, CIFAR_SIDE], data)?;
    LoadedData::from_raw(Dataset::new(images, labels, CIFAR_CLASSES)?, norm)
}

pub fn load_cifar10_binary(path: &Path, indices: Option<&[usize]>) -> Result<LoadedData, Error> {
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_cifar10(&bytes, indices)
}

/// Synthetic images normalized with their own statistics.
pub fn gen_synthetic(n: usize, channels: usize, size: usize, classes: usize, seed: u64) -> Result<LoadedData, Error> {
    let raw = synthetic(n, channels, size, classes, seed)?;
    let norm = Normalization::fit(&raw.images);
    LoadedData::from_raw(raw, norm)
}

pub fn load(config: &DatasetConfig) -> Result<LoadedData, Error> {
    match config {
        DatasetConfig::Synthetic {
            n,
            size,
            channels,
            classes,
            seed,
        } => gen_synthetic(*n, *channels, *size, *classes, *seed),
        DatasetConfig::Cifar10 { path, indices } => load_cifar10_binary(path, indices.as_deref()),
    }
}
