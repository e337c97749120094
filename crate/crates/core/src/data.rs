//! Datasets: CIFAR-10 binary batches, synthetic blobs, stratified subsets and
//! seeded batch order.
//!
//! CIFAR-10 binary layout: a file is a sequence of 3073-byte records, one
//! label byte followed by 3072 pixel bytes (1024 R, 1024 G, 1024 B, each
//! plane row-major 32×32).

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{one_hot, Real, Tensor};

pub const CIFAR_SHAPE: [usize; 3] = [3, 32, 32];
pub const CIFAR_CLASSES: usize = 10;
const CIFAR_PIXELS: usize = 3 * 32 * 32;
const CIFAR_RECORD: usize = CIFAR_PIXELS + 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::shape(
                "Dataset",
                format!("images must be [N, C, H, W], got {:?}", images.shape()),
            ));
        }
        if images.dim0() != labels.len() {
            return Err(Error::contract(format!(
                "{} images but {} labels",
                images.dim0(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::contract(format!("label {bad} outside [0, {num_classes})")));
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::contract("pixel values must lie in [0, 1]"));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Images (cast to `T`) and labels at `indices`.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let x = self.images.gather_rows(indices).cast();
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    /// Images, one-hot label rows and raw labels at `indices`.
    pub fn batch_one_hot<T: Real>(&self, indices: &[usize]) -> (Tensor<T>, Tensor<T>, Vec<usize>) {
        let (x, labels) = self.batch(indices);
        let y = one_hot(&labels, self.num_classes);
        (x, y, labels)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Concatenates datasets with identical image shape and class count.
    pub fn concat(parts: Vec<Dataset>) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("no datasets to concatenate"))?;
        let classes = first.num_classes;
        if parts.iter().any(|p| p.num_classes != classes) {
            return Err(Error::contract("datasets disagree on class count"));
        }
        let images = Tensor::concat_rows(&parts.iter().map(|p| p.images.clone()).collect::<Vec<_>>())?;
        let labels = parts.into_iter().flat_map(|p| p.labels).collect();
        Self::new(images, labels, classes)
    }
}

/// Parses one CIFAR-10 binary batch from memory.
pub fn parse_cifar10_bin(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(Error::Format("CIFAR-10 batch is empty".into()));
    }
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "CIFAR-10 batch size {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format(format!("record {i} has label byte {label} > 9")));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    let images = Tensor::new(vec![n, 3, 32, 32], pixels)?;
    Dataset::new(images, labels, CIFAR_CLASSES)
}

/// Loads and concatenates CIFAR-10 binary batch files, preserving record order.
pub fn load_cifar10_bin<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::contract("no CIFAR-10 files given"));
    }
    let parts = paths
        .iter()
        .map(|p| {
            let bytes = fs::read(p.as_ref()).map_err(|e| {
                Error::Format(format!("cannot read {}: {e}", p.as_ref().display()))
            })?;
            parse_cifar10_bin(&bytes).map_err(|e| match e {
                Error::Format(m) => Error::Format(format!("{}: {m}", p.as_ref().display())),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::concat(parts)
}

/// Serializes into the CIFAR-10 binary layout, pixels rounded to the nearest byte.
pub fn encode_cifar10_bin(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.image_shape() != CIFAR_SHAPE || ds.num_classes > 256 {
        return Err(Error::contract(format!(
            "CIFAR-10 layout needs {CIFAR_SHAPE:?} images, got {:?}",
            ds.image_shape()
        )));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for i in 0..ds.len() {
        out.push(ds.labels[i] as u8);
        out.extend(ds.images.row(i).iter().map(|&v| (v * 255.0).round() as u8));
    }
    Ok(out)
}

/// Class-stratified sample of `n` examples. Per-class quotas are
/// proportional to class frequency (largest remainders, ties to the lower
/// class id); the returned order is shuffled.
pub fn subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > ds.len() {
        return Err(Error::contract(format!("subset of {n} from {} examples", ds.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = ds.class_counts();
    let total = ds.len().max(1);
    let mut quota: Vec<usize> = counts.iter().map(|&c| c * n / total).collect();
    let mut rest: Vec<(usize, usize)> = counts
        .iter()
        .enumerate()
        .map(|(k, &c)| (c * n % total, k))
        .collect();
    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut missing = n - quota.iter().sum::<usize>();
    for &(_, k) in &rest {
        if missing == 0 {
            break;
        }
        if quota[k] < counts[k] {
            quota[k] += 1;
            missing -= 1;
        }
    }
    let mut picked = Vec::with_capacity(n);
    for (k, &q) in quota.iter().enumerate() {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == k).collect();
        members.shuffle(&mut rng);
        picked.extend_from_slice(&members[..q]);
    }
    picked.shuffle(&mut rng);
    Ok(ds.select(&picked))
}

/// Gaussian blobs with unit variance whose class means sit `margin` apart
/// (means `margin/√2 · e_k` on distinct axes), mapped affinely into `[0, 1]`.
/// Labels cycle through the classes, so every class gets `n/classes` examples.
pub fn synth_blobs(n: usize, dims: [usize; 3], classes: usize, margin: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::contract("synthetic data needs at least two classes"));
    }
    let d: usize = dims.iter().product();
    if d < classes {
        return Err(Error::contract(format!(
            "{d} input dimensions cannot host {classes} orthogonal class means"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = margin / std::f64::consts::SQRT_2;
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut raw = Vec::with_capacity(n * d);
    for &label in &labels {
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            raw.push(if j == label { z + offset } else { z });
        }
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels = raw
        .iter()
        .map(|&v| (((v - lo) / span) as f32).clamp(0.0, 1.0))
        .collect();
    let images = Tensor::new(vec![n, dims[0], dims[1], dims[2]], pixels)?;
    Dataset::new(images, labels, classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchOrder {
    pub batch_size: usize,
    pub shuffle: bool,
    pub drop_last: bool,
}

/// Index batches for one epoch. With shuffling, the permutation is a pure
/// function of `(seed, epoch)`.
pub fn batch_iter(len: usize, order: BatchOrder, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if order.batch_size == 0 {
        return Err(Error::contract("batch size must be ≥ 1"));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    if order.shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        idx.shuffle(&mut rng);
    }
    Ok(idx
        .chunks(order.batch_size)
        .filter(|c| !order.drop_last || c.len() == order.batch_size)
        .map(|c| c.to_vec())
        .collect())
}
