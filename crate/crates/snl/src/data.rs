//! Synthetic toy datasets and the on-disk dataset container.

use crate::error::{Result, SnlError};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const DATASET_MAGIC: &[u8; 4] = b"SNLD";
pub const DATASET_VERSION: u32 = 1;

/// A labeled dataset. Features are stored per sample with a fixed
/// per-sample shape (flat vectors for MLPs, [c, h, w] for conv nets).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub sample_shape: Vec<usize>,
    pub labels: Vec<u32>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Batch tensor [n, sample_shape...] for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.features[0].len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.features[i]);
            labels.push(self.labels[i] as usize);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        (Tensor::new(shape, data).unwrap(), labels)
    }

    pub fn full_batch(&self) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }
}

/// Train/test split of a dataset.
#[derive(Debug, Clone)]
pub struct DataSplit {
    pub train: Dataset,
    pub test: Dataset,
}

/// Declarative dataset description, usable from config files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum DatasetSpec {
    TwoGaussians { n: usize, noise: f64, seed: u64 },
    ConcentricRings { n: usize, noise: f64, seed: u64 },
    XorGrid { n: usize, noise: f64, seed: u64 },
    BarImages { n: usize, side: usize, noise: f64, seed: u64 },
    File { path: PathBuf, seed: u64 },
}

fn split(features: Vec<Vec<f64>>, labels: Vec<u32>, sample_shape: Vec<usize>, num_classes: usize, seed: u64) -> DataSplit {
    let n = features.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5911);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_test = n / 5;
    let mk = |idx: &[usize]| Dataset {
        features: idx.iter().map(|&i| features[i].clone()).collect(),
        labels: idx.iter().map(|&i| labels[i]).collect(),
        sample_shape: sample_shape.clone(),
        num_classes,
    };
    DataSplit { train: mk(&order[n_test..]), test: mk(&order[..n_test]) }
}

/// Two Gaussian blobs at (-1,-1) and (1,1).
pub fn two_gaussians(n: usize, noise: f64, seed: u64) -> DataSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u32;
        let center = if label == 0 { -1.0 } else { 1.0 };
        features.push(vec![center + gauss(&mut rng) * noise, center + gauss(&mut rng) * noise]);
        labels.push(label);
    }
    split(features, labels, vec![2], 2, seed)
}

/// Class 0 on a radius-1 circle, class 1 on radius 2.
pub fn concentric_rings(n: usize, noise: f64, seed: u64) -> DataSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u32;
        let r = if label == 0 { 1.0 } else { 2.0 };
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        features.push(vec![
            r * theta.cos() + gauss(&mut rng) * noise,
            r * theta.sin() + gauss(&mut rng) * noise,
        ]);
        labels.push(label);
    }
    split(features, labels, vec![2], 2, seed)
}

/// Four clusters at (+-1, +-1) with XOR labels; not linearly separable.
pub fn xor_grid(n: usize, noise: f64, seed: u64) -> DataSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let corner = i % 4;
        let (sx, sy) = [(1.0, 1.0), (-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0)][corner];
        let label = if corner < 2 { 0u32 } else { 1u32 };
        features.push(vec![sx + gauss(&mut rng) * noise, sy + gauss(&mut rng) * noise]);
        labels.push(label);
    }
    split(features, labels, vec![2], 2, seed)
}

/// Noisy horizontal-vs-vertical bar images, for the toy conv nets.
pub fn bar_images(n: usize, side: usize, noise: f64, seed: u64) -> DataSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u32;
        let pos = rng.gen_range(1..side - 1);
        let mut img = vec![0.0; side * side];
        for k in 0..side {
            let idx = if label == 0 { pos * side + k } else { k * side + pos };
            img[idx] = 1.0;
        }
        for v in &mut img {
            *v += gauss(&mut rng) * noise;
        }
        features.push(img);
        labels.push(label);
    }
    split(features, labels, vec![1, side, side], 2, seed)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Materialize a [`DatasetSpec`].
pub fn load_dataset(spec: &DatasetSpec) -> Result<DataSplit> {
    match spec {
        DatasetSpec::TwoGaussians { n, noise, seed } => Ok(two_gaussians(*n, *noise, *seed)),
        DatasetSpec::ConcentricRings { n, noise, seed } => Ok(concentric_rings(*n, *noise, *seed)),
        DatasetSpec::XorGrid { n, noise, seed } => Ok(xor_grid(*n, *noise, *seed)),
        DatasetSpec::BarImages { n, side, noise, seed } => {
            Ok(bar_images(*n, *side, *noise, *seed))
        }
        DatasetSpec::File { path, seed } => {
            let ds = read_dataset_file(path)?;
            Ok(split(ds.features, ds.labels, ds.sample_shape, ds.num_classes, *seed))
        }
    }
}

/// Write a dataset container: magic, version, count, dims, class count,
/// f64 features (little-endian), u32 labels.
pub fn write_dataset_file(ds: &Dataset, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(DATASET_MAGIC);
    bytes.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(ds.sample_shape.len() as u32).to_le_bytes());
    for &d in &ds.sample_shape {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    bytes.extend_from_slice(&(ds.num_classes as u32).to_le_bytes());
    for row in &ds.features {
        for v in row {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &l in &ds.labels {
        bytes.extend_from_slice(&l.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_dataset_file(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let need = |ok: bool| -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(SnlError::DatasetFormat("file too short".into()))
        }
    };
    need(bytes.len() >= 16)?;
    if &bytes[0..4] != DATASET_MAGIC {
        return Err(SnlError::DatasetFormat("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(SnlError::DatasetFormat(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let ndims = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    need(bytes.len() >= 16 + 4 * ndims + 4)?;
    let mut cursor = 16;
    let mut sample_shape = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        sample_shape.push(u32::from_le_bytes(bytes[cursor..cursor + 4].try_into().unwrap()) as usize);
        cursor += 4;
    }
    let num_classes = u32::from_le_bytes(bytes[cursor..cursor + 4].try_into().unwrap()) as usize;
    cursor += 4;
    let sample_len: usize = sample_shape.iter().product();
    let body = count * sample_len * 8 + count * 4;
    if bytes.len() != cursor + body {
        return Err(SnlError::DatasetFormat(format!(
            "expected {} body bytes, found {}",
            body,
            bytes.len() - cursor
        )));
    }
    let mut features = Vec::with_capacity(count);
    for _ in 0..count {
        let mut row = Vec::with_capacity(sample_len);
        for _ in 0..sample_len {
            row.push(f64::from_le_bytes(bytes[cursor..cursor + 8].try_into().unwrap()));
            cursor += 8;
        }
        features.push(row);
    }
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let l = u32::from_le_bytes(bytes[cursor..cursor + 4].try_into().unwrap());
        cursor += 4;
        if l as usize >= num_classes {
            return Err(SnlError::DatasetFormat(format!(
                "label {l} exceeds class count {num_classes}"
            )));
        }
        labels.push(l);
    }
    Ok(Dataset { features, sample_shape, labels, num_classes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_deterministic() {
        let a = two_gaussians(100, 0.3, 7);
        let b = two_gaussians(100, 0.3, 7);
        assert_eq!(a.train.features, b.train.features);
        assert_eq!(a.test.labels, b.test.labels);
    }

    #[test]
    fn file_roundtrip_bit_exact() {
        let ds = xor_grid(40, 0.1, 3).train;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.snld");
        write_dataset_file(&ds, &path).unwrap();
        let loaded = read_dataset_file(&path).unwrap();
        assert_eq!(ds.features, loaded.features);
        assert_eq!(ds.labels, loaded.labels);
        assert_eq!(ds.sample_shape, loaded.sample_shape);
    }

    #[test]
    fn bad_label_rejected() {
        let mut ds = two_gaussians(10, 0.1, 0).train;
        ds.labels[0] = 9;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.snld");
        write_dataset_file(&ds, &path).unwrap();
        assert!(read_dataset_file(&path).is_err());
    }

    #[test]
    fn malformed_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.snld");
        std::fs::write(&path, b"not a dataset").unwrap();
        assert!(read_dataset_file(&path).is_err());
    }
}
