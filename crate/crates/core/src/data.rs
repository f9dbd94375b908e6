//! Datasets: IDX ingestion, synthetic generators, deterministic splits and
//! minibatch orders.

use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Stream key separating split shuffles from batch shuffles of the same seed.
const SPLIT_STREAM: u64 = 0x0005_b117;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let (n, _) = features.dims2()?;
        if n != labels.len() {
            return Err(Error::Data(format!(
                "{n} feature rows but {} labels",
                labels.len()
            )));
        }
        if class_count == 0 {
            return Err(Error::Data("class_count must be positive".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            class_count,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub(crate) fn check_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        Ok(())
    }

    /// Rows `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Data("subset needs at least one index".into()));
        }
        Ok(Dataset {
            features: self.features.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        })
    }

    /// The first `n` examples (or all if fewer).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Minibatch tensor and labels for the given example indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.features.select_rows(indices)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Writes `label,f1,...,fd` rows with a header line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("label");
        for j in 1..=self.dim() {
            out.push_str(&format!(",f{j}"));
        }
        out.push('\n');
        for (r, label) in self.labels.iter().enumerate() {
            out.push_str(&label.to_string());
            for v in self.features.row(r) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Per-feature mean/std, fitted on one split and applied to others.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl FeatureStats {
    pub fn fit(data: &Dataset) -> Self {
        let (n, d) = (data.len(), data.dim());
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(data.features.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(data.features.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|s| (s / n as f64).sqrt()).collect();
        FeatureStats { mean, std }
    }

    /// Standardizes features; constant features are only centered.
    pub fn apply(&self, data: &Dataset) -> Dataset {
        let d = data.dim();
        let mut features = data.features.clone();
        for (i, v) in features.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v -= self.mean[j];
            if self.std[j] > 0.0 {
                *v /= self.std[j];
            }
        }
        Dataset {
            features,
            labels: data.labels.clone(),
            class_count: data.class_count,
        }
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("truncated header: missing {what}")))
}

/// Parses IDX image and label files (optionally gzip-compressed). Pixel
/// bytes are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_maybe_gz(images_path)?;
    let labels = read_maybe_gz(labels_path)?;
    parse_idx(&images, &labels)
}

pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = be_u32(images, 0, "images magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "images magic: expected {IDX_IMAGES_MAGIC:#010x}, found {magic:#010x}"
        )));
    }
    let count = be_u32(images, 4, "images count")? as usize;
    let rows = be_u32(images, 8, "images rows")? as usize;
    let cols = be_u32(images, 12, "images cols")? as usize;
    let magic = be_u32(labels, 0, "labels magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "labels magic: expected {IDX_LABELS_MAGIC:#010x}, found {magic:#010x}"
        )));
    }
    let label_count = be_u32(labels, 4, "labels count")? as usize;
    if label_count != count {
        return Err(Error::Format(format!(
            "count mismatch: images count {count} vs labels count {label_count}"
        )));
    }
    if count == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format(format!(
            "images dims must be positive, got ({count}, {rows}, {cols})"
        )));
    }
    let d = rows * cols;
    let pixels = images.get(16..).unwrap_or_default();
    if pixels.len() < count * d {
        return Err(Error::Format(format!(
            "truncated images payload: expected {} bytes, found {}",
            count * d,
            pixels.len()
        )));
    }
    let label_bytes = labels.get(8..).unwrap_or_default();
    if label_bytes.len() < count {
        return Err(Error::Format(format!(
            "truncated labels payload: expected {count} bytes, found {}",
            label_bytes.len()
        )));
    }
    let features = pixels[..count * d]
        .iter()
        .map(|&p| p as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = label_bytes[..count].iter().map(|&l| l as usize).collect();
    let class_count = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(Tensor::new(vec![count, d], features)?, labels, class_count)
}

/// Writes raw (uncompressed) IDX image and label files.
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    labels: &[u8],
) -> Result<()> {
    let count = labels.len();
    assert_eq!(pixels.len(), count * rows * cols, "pixel count");
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + count);
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(count as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    let write = |p: &Path, bytes: &[u8]| {
        fs::File::create(p)
            .and_then(|mut f| f.write_all(bytes))
            .map_err(|e| Error::io(p, e))
    };
    write(images_path, &img)?;
    write(labels_path, &lab)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    TwoGaussians,
    ConcentricRings,
}

/// Two-class 2-D datasets. Example `i` has class `i % 2`; features are
/// min-max scaled to [0, 1] per column.
pub fn make_synthetic(kind: SyntheticKind, n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Config(format!(
            "synthetic dataset needs n >= 2, got {n}"
        )));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::Config(format!(
            "noise_std must be >= 0, got {noise_std}"
        )));
    }
    let mut rng = rng_for(seed, &[kind as u64]);
    let noise = Normal::new(0.0, noise_std).expect("valid std");
    let mut raw = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let (x, y) = match kind {
            SyntheticKind::TwoGaussians => {
                let c = if class == 0 { -1.0 } else { 1.0 };
                (c + noise.sample(&mut rng), c + noise.sample(&mut rng))
            }
            SyntheticKind::ConcentricRings => {
                let angle = rng.random_range(0.0..2.0 * PI);
                let radius = 1.0 + class as f64 + noise.sample(&mut rng);
                (radius * angle.cos(), radius * angle.sin())
            }
        };
        raw.extend([x, y]);
        labels.push(class);
    }
    for col in 0..2 {
        let values = raw.iter().skip(col).step_by(2);
        let lo = values.clone().copied().fold(f64::INFINITY, f64::min);
        let hi = values.copied().fold(f64::NEG_INFINITY, f64::max);
        for v in raw.iter_mut().skip(col).step_by(2) {
            *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.0 };
        }
    }
    Dataset::new(Tensor::new(vec![n, 2], raw)?, labels, 2)
}

/// Example counts for a three-way split; the last part takes the remainder.
fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::Config(format!(
            "split fractions must be positive, got {fractions:?}"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions sum to {total}, not 1"
        )));
    }
    let a = (n as f64 * fractions[0]).round() as usize;
    let b = (n as f64 * fractions[1]).round() as usize;
    if a == 0 || b == 0 || a + b >= n {
        return Err(Error::Config(format!(
            "fractions {fractions:?} leave an empty split of {n} examples"
        )));
    }
    Ok([a, b, n - a - b])
}

/// Shuffled index partition into (train, val, test).
pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    let [a, b, _] = split_sizes(n, fractions)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, &[SPLIT_STREAM]));
    let test = idx.split_off(a + b);
    let val = idx.split_off(a);
    Ok([idx, val, test])
}

/// Shuffled (train, val) partition, for data whose test set lives elsewhere.
pub fn split_pair(data: &Dataset, fractions: [f64; 2], seed: u64) -> Result<(Dataset, Dataset)> {
    let n = data.len();
    let total = fractions[0] + fractions[1];
    if fractions.iter().any(|&f| !(f > 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be positive and sum to 1, got {fractions:?}"
        )));
    }
    let a = (n as f64 * fractions[0]).round() as usize;
    if a == 0 || a >= n {
        return Err(Error::Config(format!(
            "fractions {fractions:?} leave an empty split of {n} examples"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, &[SPLIT_STREAM]));
    let val = idx.split_off(a);
    Ok((data.subset(&idx)?, data.subset(&val)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn split(data: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Splits> {
    let [train, val, test] = split_indices(data.len(), fractions, seed)?;
    Ok(Splits {
        train: data.subset(&train)?,
        val: data.subset(&val)?,
        test: data.subset(&test)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub shuffle_seed: u64,
    #[serde(default)]
    pub drop_last: bool,
}

impl BatchPlan {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > n {
            return Err(Error::Config(format!(
                "batch_size {} must be in 1..={n}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Minibatch index lists for one epoch, reshuffled per `(shuffle_seed, epoch)`.
pub fn batches(n: usize, plan: &BatchPlan, epoch: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(plan.shuffle_seed, &[epoch]));
    idx.chunks(plan.batch_size)
        .filter(|c| !plan.drop_last || c.len() == plan.batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}
