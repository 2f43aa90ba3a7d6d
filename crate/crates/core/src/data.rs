//! Dataset ingestion and deterministic batching.
//!
//! CIFAR-10 is read in its standard binary layout: records of 3073 bytes,
//! one label byte followed by 3072 pixel bytes (channel-planar R, G, B, each
//! a row-major 32×32 plane). Synthetic Gaussian datasets stand in where no
//! image data is wanted or available, and can be exported in the same binary
//! layout to exercise the loader.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_DIM: usize = 3 * 32 * 32;
const CIFAR_RECORD: usize = 1 + CIFAR_DIM;
/// Train-split batch files inside a CIFAR-10 binary directory.
const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

/// An immutable labelled dataset: features `[N, dim]`, one integer label
/// per row.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Dataset> {
        if features.rank() != 2 || features.rows() != labels.len() {
            return Err(Error::domain(
                "Dataset::new",
                format!("features {:?} do not match {} labels", features.shape(), labels.len()),
            ));
        }
        if classes == 0 {
            return Err(Error::Config("a dataset needs at least one class".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        Ok(Dataset { features, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature dimension per sample.
    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (self.features.row(i), self.labels[i])
    }

    /// Copy the listed samples into a `[B, dim]` matrix plus labels.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let dim = self.dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::domain(
                    "Dataset::gather",
                    format!("index {i} out of range for {} samples", self.len()),
                ));
            }
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(&[indices.len(), dim], data)?, labels))
    }

    /// View one sample as a `[channels, h, w]` image. Requires
    /// `channels·h·w == dim`; features are stored channel-planar, matching
    /// the CIFAR layout.
    pub fn image(&self, i: usize, channels: usize, h: usize, w: usize) -> Result<Tensor> {
        if channels * h * w != self.dim() {
            return Err(Error::domain(
                "Dataset::image",
                format!("[{channels}, {h}, {w}] does not tile a {}-dim sample", self.dim()),
            ));
        }
        Tensor::new(&[channels, h, w], self.features.row(i).to_vec())
    }

    /// First `n` samples (or all of them, if fewer).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        let indices: Vec<usize> = (0..n).collect();
        let (features, labels) = self.gather(&indices)?;
        Dataset::new(features, labels, self.classes)
    }

    /// Per-column mean and population standard deviation.
    pub fn column_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.len().max(1) as f64;
        let dim = self.dim();
        let mut mean = vec![0.0; dim];
        for i in 0..self.len() {
            for (m, v) in mean.iter_mut().zip(self.features.row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; dim];
        for i in 0..self.len() {
            for j in 0..dim {
                let d = self.features.row(i)[j] - mean[j];
                var[j] += d * d;
            }
        }
        let std: Vec<f64> = var.iter().map(|&v| (v / n).sqrt()).collect();
        (mean, std)
    }

    /// Shift and scale columns by the given statistics (typically the train
    /// split's, applied to both splits). Zero-spread columns are centred
    /// only.
    pub fn standardized_by(&self, mean: &[f64], std: &[f64]) -> Result<Dataset> {
        let dim = self.dim();
        if mean.len() != dim || std.len() != dim {
            return Err(Error::domain(
                "Dataset::standardized_by",
                format!("{}-dim statistics for {dim}-dim samples", mean.len()),
            ));
        }
        let mut data = Vec::with_capacity(self.len() * dim);
        for i in 0..self.len() {
            for j in 0..dim {
                let scale = if std[j] > 0.0 { 1.0 / std[j] } else { 1.0 };
                data.push((self.features.row(i)[j] - mean[j]) * scale);
            }
        }
        Dataset::new(Tensor::new(&[self.len(), dim], data)?, self.labels.clone(), self.classes)
    }

    /// Shift and scale every feature column to zero mean and unit variance
    /// over this dataset.
    pub fn standardized(&self) -> Result<Dataset> {
        let (mean, std) = self.column_stats();
        self.standardized_by(&mean, &std)
    }

    /// Write the dataset in the CIFAR binary layout (3073-byte records),
    /// quantizing features to bytes. Requires `dim == 3072`, labels < 10 and
    /// features in `[0, 1]`.
    pub fn write_cifar_layout(&self, path: &Path) -> Result<()> {
        let fmt = |msg: String| Error::Format { path: path.display().to_string(), msg };
        if self.dim() != CIFAR_DIM {
            return Err(fmt(format!("CIFAR layout needs {CIFAR_DIM}-dim samples, got {}", self.dim())));
        }
        let mut bytes = Vec::with_capacity(self.len() * CIFAR_RECORD);
        for i in 0..self.len() {
            if self.labels[i] > 9 {
                return Err(fmt(format!("label {} does not fit a CIFAR label byte", self.labels[i])));
            }
            bytes.push(self.labels[i] as u8);
            for &v in self.features.row(i) {
                if !(0.0..=1.0).contains(&v) {
                    return Err(fmt(format!("feature {v} outside [0, 1] cannot be quantized")));
                }
                bytes.push((v * 255.0).round() as u8);
            }
        }
        fs::write(path, bytes)?;
        Ok(())
    }
}

fn parse_cifar_bytes(bytes: &[u8], path: &Path) -> Result<(Vec<f64>, Vec<usize>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format {
            path: path.display().to_string(),
            msg: format!(
                "size {} is not a positive multiple of the {CIFAR_RECORD}-byte record",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut features = Vec::with_capacity(n * CIFAR_DIM);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::Format {
                path: path.display().to_string(),
                msg: format!("label byte {label} exceeds 9"),
            });
        }
        labels.push(label);
        features.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok((features, labels))
}

fn load_cifar_files(paths: &[PathBuf]) -> Result<Dataset> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = fs::read(path)?;
        let (f, l) = parse_cifar_bytes(&bytes, path)?;
        features.extend(f);
        labels.extend(l);
    }
    let n = labels.len();
    Dataset::new(Tensor::new(&[n, CIFAR_DIM], features)?, labels, CIFAR_CLASSES)
}

/// Resolve a user-supplied path to the directory that actually holds the
/// batch files (the path itself, or a `cifar-10-batches-bin` child).
fn resolve_cifar_dir(path: &Path) -> PathBuf {
    let nested = path.join("cifar-10-batches-bin");
    if nested.join(TRAIN_FILES[0]).exists() {
        nested
    } else {
        path.to_path_buf()
    }
}

/// Load CIFAR-10 records from `path`.
///
/// A file is read as one split; a directory is read as the train split
/// (`data_batch_1..5.bin` concatenated in order).
pub fn load_cifar10(path: &Path) -> Result<Dataset> {
    if path.is_dir() {
        let dir = resolve_cifar_dir(path);
        let files: Vec<PathBuf> = TRAIN_FILES.iter().map(|f| dir.join(f)).collect();
        if let Some(missing) = files.iter().find(|f| !f.exists()) {
            return Err(Error::Format {
                path: path.display().to_string(),
                msg: format!("missing train batch file {}", missing.display()),
            });
        }
        load_cifar_files(&files)
    } else {
        load_cifar_files(&[path.to_path_buf()])
    }
}

/// Load the test split (`test_batch.bin`) from a CIFAR-10 directory.
pub fn load_cifar10_test(path: &Path) -> Result<Dataset> {
    if path.is_dir() {
        load_cifar_files(&[resolve_cifar_dir(path).join(TEST_FILE)])
    } else {
        load_cifar_files(&[path.to_path_buf()])
    }
}

/// Class-conditional Gaussians: unit covariance around fixed means placed on
/// a centred, scaled simplex (vertex `e_{c mod dim}`, centroid subtracted).
/// With one class the mean is the origin, i.e. a standard multivariate
/// normal. Labels cycle `0, 1, …, classes−1, 0, …` so classes stay balanced;
/// identical `(n, dim, classes, seed)` reproduce the dataset bitwise.
pub fn synthetic_gaussian(n: usize, dim: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || dim == 0 || classes == 0 {
        return Err(Error::Config(format!(
            "synthetic_gaussian needs positive n, dim and classes, got ({n}, {dim}, {classes})"
        )));
    }
    let means = class_means(dim, classes);
    let mut rng = Rng::new(seed).derive(0xDA7A);
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        for &m in &means[c] {
            features.push(m + rng.normal());
        }
    }
    Dataset::new(Tensor::new(&[n, dim], features)?, labels, classes)
}

/// Separation scale of the synthetic class means.
pub const SIMPLEX_SCALE: f64 = 3.0;

/// Means for [`synthetic_gaussian`], exposed so tests can compare sample
/// statistics against them.
pub fn class_means(dim: usize, classes: usize) -> Vec<Vec<f64>> {
    let mut centroid = vec![0.0; dim];
    for c in 0..classes {
        centroid[c % dim] += 1.0 / classes as f64;
    }
    (0..classes)
        .map(|c| {
            let mut m: Vec<f64> = centroid.iter().map(|v| -SIMPLEX_SCALE * v).collect();
            m[c % dim] += SIMPLEX_SCALE;
            m
        })
        .collect()
}

/// Deterministic minibatch schedule: a fresh Fisher–Yates permutation per
/// epoch, derived from `seed` and the epoch index alone.
#[derive(Debug, Clone, Copy)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
}

impl BatchPlan {
    pub fn new(seed: u64, batch_size: usize) -> Result<BatchPlan> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(BatchPlan { seed, batch_size })
    }

    /// The order samples are visited in the given epoch.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = Rng::new(self.seed).derive(0x0BA7).derive(epoch as u64);
        rng.shuffle(&mut order);
        order
    }
}

/// Lazy iterator over one epoch's minibatches; the final partial batch is
/// kept rather than dropped.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl Iterator for Batches<'_> {
    type Item = Result<(Tensor, Vec<usize>)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let item = self.ds.gather(&self.order[self.cursor..end]);
        self.cursor = end;
        Some(item)
    }
}

/// Minibatches of `ds` for one epoch under `plan`.
pub fn batches<'a>(ds: &'a Dataset, plan: &BatchPlan, epoch: usize) -> Batches<'a> {
    Batches {
        ds,
        order: plan.epoch_order(ds.len(), epoch),
        batch_size: plan.batch_size,
        cursor: 0,
    }
}
