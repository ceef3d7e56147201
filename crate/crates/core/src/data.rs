//! Embedding datasets: in-memory representation, the `FSE1` binary format,
//! and synthetic worlds drawn from the class-mean generative model.
//!
//! `FSE1` layout (all little-endian):
//!
//! | offset | size | field                       |
//! |--------|------|-----------------------------|
//! | 0      | 4    | magic `b"FSE1"`             |
//! | 4      | 4    | version `u32` (= 1)         |
//! | 8      | 4    | dim `u32`                   |
//! | 12     | 8    | count `u64`                 |
//! | 20     | ...  | `count` records             |
//!
//! Each record is a `u32` label (≥ 1) followed by `dim` `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{FlowrError, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"FSE1";
pub const DATASET_VERSION: u32 = 1;
pub const DATASET_HEADER_LEN: u64 = 20;

/// One labeled feature vector. Labels are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub label: usize,
    pub features: Vec<f64>,
}

impl Sample {
    pub fn new(label: usize, features: Vec<f64>) -> Self {
        Self { label, features }
    }
}

/// Labeled feature vectors with densely numbered classes `1..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    samples: Vec<Sample>,
    n_classes: usize,
}

impl EmbeddingDataset {
    pub fn new(dim: usize, samples: Vec<Sample>) -> Result<Self> {
        let mut seen = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != dim {
                return Err(FlowrError::DimensionMismatch {
                    expected: dim,
                    actual: s.features.len(),
                });
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(FlowrError::Config(format!("sample {i} has non-finite features")));
            }
            if s.label == 0 {
                return Err(FlowrError::NonDenseLabels(format!("sample {i} has label 0")));
            }
            if s.label > seen.len() {
                seen.resize(s.label, false);
            }
            seen[s.label - 1] = true;
        }
        if let Some(missing) = seen.iter().position(|&v| !v) {
            return Err(FlowrError::NonDenseLabels(format!(
                "class {} has no samples but {} classes are present",
                missing + 1,
                seen.len()
            )));
        }
        Ok(Self {
            dim,
            n_classes: seen.len(),
            samples,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Sample indices grouped by class; entry `n` holds class `n + 1`.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes];
        for (i, s) in self.samples.iter().enumerate() {
            out[s.label - 1].push(i);
        }
        out
    }

    /// Split every class into train/test parts; each class keeps at least
    /// one point on each side when it has two or more.
    pub fn split_per_class(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(FlowrError::Config(format!(
                "test fraction must be in [0, 1), got {test_fraction}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for idx in self.class_indices() {
            let mut idx = idx;
            idx.shuffle(&mut rng);
            let mut n_test = (idx.len() as f64 * test_fraction).round() as usize;
            if idx.len() >= 2 {
                n_test = n_test.clamp(1, idx.len() - 1);
            } else {
                n_test = 0;
            }
            idx.sort_unstable();
            for (j, &i) in idx.iter().enumerate() {
                if j < idx.len() - n_test {
                    train.push(self.samples[i].clone());
                } else {
                    test.push(self.samples[i].clone());
                }
            }
        }
        Ok((Self::new(self.dim, train)?, Self::new(self.dim, test)?))
    }
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &EmbeddingDataset) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_dataset_to(&mut w, ds)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset_to<W: Write>(w: &mut W, ds: &EmbeddingDataset) -> Result<()> {
    let dim = u32::try_from(ds.dim).map_err(|_| FlowrError::Config("dim exceeds u32".into()))?;
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&dim.to_le_bytes())?;
    w.write_all(&(ds.samples.len() as u64).to_le_bytes())?;
    for s in &ds.samples {
        let label = u32::try_from(s.label).map_err(|_| FlowrError::Config("label exceeds u32".into()))?;
        w.write_all(&label.to_le_bytes())?;
        for v in &s.features {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let bytes = std::fs::read(path)?;
    parse_dataset(&bytes)
}

pub fn read_dataset_from<R: Read>(r: &mut R) -> Result<EmbeddingDataset> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_dataset(&bytes)
}

fn format_err(offset: usize, message: impl Into<String>) -> FlowrError {
    FlowrError::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Parse an `FSE1` byte buffer.
pub fn parse_dataset(bytes: &[u8]) -> Result<EmbeddingDataset> {
    if bytes.len() < DATASET_HEADER_LEN as usize {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    if &bytes[0..4] != DATASET_MAGIC {
        return Err(format_err(0, "bad magic, expected FSE1"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let record_len = 4 + 4 * dim;
    let body = bytes.len() - DATASET_HEADER_LEN as usize;
    let expected = (count as u128) * record_len as u128;
    if (body as u128) < expected {
        let complete = body / record_len;
        return Err(format_err(
            DATASET_HEADER_LEN as usize + complete * record_len,
            format!("truncated record {complete} of {count}"),
        ));
    }
    if (body as u128) > expected {
        return Err(format_err(
            DATASET_HEADER_LEN as usize + expected as usize,
            "trailing bytes after the declared records",
        ));
    }
    let mut samples = Vec::with_capacity(count as usize);
    let mut off = DATASET_HEADER_LEN as usize;
    for i in 0..count as usize {
        let label = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if label == 0 {
            return Err(format_err(off, format!("record {i} has label 0")));
        }
        let features = bytes[off + 4..off + record_len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        samples.push(Sample { label, features });
        off += record_len;
    }
    EmbeddingDataset::new(dim, samples)
}

/// A synthetic dataset together with the class means it was drawn from.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub dataset: EmbeddingDataset,
    pub means: Vec<Vec<f64>>,
}

/// Class means `~ N(0, prior_variance I)`, points `~ N(mean, noise_variance I)`.
/// Feature values are rounded to `f32` so the world survives an `FSE1`
/// round trip unchanged.
pub fn generate_synthetic_world(
    n_classes: usize,
    dim: usize,
    prior_variance: f64,
    noise_variance: f64,
    points_per_class: usize,
    seed: u64,
) -> Result<SyntheticWorld> {
    if n_classes == 0 || dim == 0 || points_per_class == 0 {
        return Err(FlowrError::Config(
            "n_classes, dim and points_per_class must be at least 1".into(),
        ));
    }
    if prior_variance.is_nan() || noise_variance.is_nan() || prior_variance < 0.0 || noise_variance < 0.0 {
        return Err(FlowrError::Config("variances must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prior_sd = prior_variance.sqrt();
    let noise_sd = noise_variance.sqrt();
    let mut means = Vec::with_capacity(n_classes);
    let mut samples = Vec::with_capacity(n_classes * points_per_class);
    for n in 0..n_classes {
        let mean: Vec<f64> = (0..dim)
            .map(|_| prior_sd * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        for _ in 0..points_per_class {
            let features = mean
                .iter()
                .map(|m| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    (m + noise_sd * e) as f32 as f64
                })
                .collect();
            samples.push(Sample::new(n + 1, features));
        }
        means.push(mean);
    }
    Ok(SyntheticWorld {
        dataset: EmbeddingDataset::new(dim, samples)?,
        means,
    })
}
