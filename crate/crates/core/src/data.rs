//! Dataset loading: MNIST IDX files, the `NLFC` feature cache, synthetic
//! Gaussian blobs, and seeded train/validation splits.
//!
//! # Feature cache layout (`NLFC`, version 1)
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! offset  size       field
//! 0       4          magic, ASCII "NLFC"
//! 4       4          version, u32 = 1
//! 8       8          n (samples), u64 > 0
//! 16      8          d (features), u64 > 0
//! 24      4          k_c (classes), u32 >= 2
//! 28      4·n·d      features, f32, row-major
//! ..      4·n        labels, i32 in [0, k_c)
//! ```
//!
//! The file must end exactly after the last label.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, LabelVector};
use crate::rng::{stream, Purpose};

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
const MNIST_CLASSES: usize = 10;

const CACHE_MAGIC: &[u8; 4] = b"NLFC";
const CACHE_VERSION: u32 = 1;
const CACHE_HEADER_LEN: usize = 28;

/// Features, labels and a display name.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: DenseMatrix,
    pub labels: LabelVector,
    pub name: String,
}

impl LabeledDataset {
    pub fn new(features: DenseMatrix, labels: LabelVector, name: impl Into<String>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        Ok(Self {
            features,
            labels,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.num_classes()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: self.labels.select(indices),
            name: self.name.clone(),
        }
    }

    /// The first `n` samples (all of them if `n` exceeds the size).
    pub fn take_first(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn with_labels(&self, labels: LabelVector) -> Result<Self> {
        Self::new(self.features.clone(), labels, self.name.clone())
    }
}

/// Bounds-checked reader over a byte slice.
pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N).map(|s| s.try_into().expect("length checked"))
    }

    pub(crate) fn u32_be(&mut self) -> Option<u32> {
        self.array().map(u32::from_be_bytes)
    }

    pub(crate) fn u32_le(&mut self) -> Option<u32> {
        self.array().map(u32::from_le_bytes)
    }

    pub(crate) fn u64_le(&mut self) -> Option<u64> {
        self.array().map(u64::from_le_bytes)
    }

    pub(crate) fn f64s_le(&mut self, count: usize) -> Option<Vec<f64>> {
        let raw = self.take(count.checked_mul(8)?)?;
        Some(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
        )
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.remaining() == 0
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |reason: String| Error::format(path, reason);
    let mut cur = ByteCursor::new(bytes);
    let magic = cur.u32_be().ok_or_else(|| bad("truncated header".into()))?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(bad(format!("image magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}")));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = cur.u32_be().ok_or_else(|| bad("truncated header".into()))? as usize;
    }
    let [n, rows, cols] = dims;
    let d = rows * cols;
    if d == 0 {
        return Err(bad("zero-sized images".into()));
    }
    let pixels = cur
        .take(n * d)
        .ok_or_else(|| bad(format!("truncated: {n} images of {d} bytes declared")))?;
    if !cur.is_empty() {
        return Err(bad(format!("{} trailing bytes", cur.remaining())));
    }
    Ok((n, d, pixels.to_vec()))
}

fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let bad = |reason: String| Error::format(path, reason);
    let mut cur = ByteCursor::new(bytes);
    let magic = cur.u32_be().ok_or_else(|| bad("truncated header".into()))?;
    if magic != IDX_LABEL_MAGIC {
        return Err(bad(format!("label magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}")));
    }
    let n = cur.u32_be().ok_or_else(|| bad("truncated header".into()))? as usize;
    let raw = cur
        .take(n)
        .ok_or_else(|| bad(format!("truncated: {n} labels declared")))?;
    if !cur.is_empty() {
        return Err(bad(format!("{} trailing bytes", cur.remaining())));
    }
    if let Some((i, &y)) = raw.iter().enumerate().find(|(_, &y)| y as usize >= MNIST_CLASSES) {
        return Err(bad(format!("label {y} at index {i} is not a digit")));
    }
    Ok(raw.iter().map(|&y| y as usize).collect())
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]`.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let (n, d, pixels) = parse_idx_images(&read_file(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_file(labels_path)?, labels_path)?;
    if labels.len() != n {
        return Err(Error::format(
            labels_path,
            format!("{} labels for {n} images", labels.len()),
        ));
    }
    let features = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    LabeledDataset::new(
        DenseMatrix::from_vec_unchecked(n, d, features),
        LabelVector::new(labels, MNIST_CLASSES)?,
        "mnist",
    )
}

/// Loads an `NLFC` feature cache (see the module docs for the layout).
pub fn load_feature_cache(path: &Path) -> Result<LabeledDataset> {
    let bytes = read_file(path)?;
    let bad = |reason: String| Error::format(path, reason);
    let mut cur = ByteCursor::new(&bytes);
    if cur.take(4).ok_or_else(|| bad("truncated header".into()))? != CACHE_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = cur.u32_le().ok_or_else(|| bad("truncated header".into()))?;
    if version != CACHE_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n = cur.u64_le().ok_or_else(|| bad("truncated header".into()))?;
    let d = cur.u64_le().ok_or_else(|| bad("truncated header".into()))?;
    let k = cur.u32_le().ok_or_else(|| bad("truncated header".into()))? as usize;
    if n == 0 || d == 0 || k < 2 {
        return Err(bad(format!("invalid sizes n={n}, d={d}, k_c={k}")));
    }
    let expected = usize::try_from(n)
        .ok()
        .zip(usize::try_from(d).ok())
        .and_then(|(n, d)| n.checked_mul(d)?.checked_add(n)?.checked_mul(4))
        .ok_or_else(|| bad("declared sizes overflow".into()))?;
    if cur.remaining() != expected {
        return Err(bad(format!(
            "payload is {} bytes, header declares {expected}",
            cur.remaining()
        )));
    }
    let (n, d) = (n as usize, d as usize);
    let features: Vec<f64> = cur
        .take(n * d * 4)
        .expect("size checked")
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("chunk of 4"))))
        .collect();
    if let Some(i) = features.iter().position(|v| !v.is_finite()) {
        return Err(bad(format!("non-finite feature in sample {}", i / d)));
    }
    let labels = cur
        .take(n * 4)
        .expect("size checked")
        .chunks_exact(4)
        .enumerate()
        .map(|(i, c)| {
            let y = i32::from_le_bytes(c.try_into().expect("chunk of 4"));
            usize::try_from(y)
                .ok()
                .filter(|&y| y < k)
                .ok_or_else(|| bad(format!("label {y} of sample {i} outside [0, {k})")))
        })
        .collect::<Result<Vec<_>>>()?;
    let name = path
        .file_stem()
        .map_or_else(|| "cache".to_string(), |s| s.to_string_lossy().into_owned());
    LabeledDataset::new(
        DenseMatrix::from_vec_unchecked(n, d, features),
        LabelVector::new(labels, k)?,
        name,
    )
}

/// Writes `ds` as an `NLFC` feature cache. Features are narrowed to `f32`.
pub fn write_feature_cache(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let (n, d) = ds.features.shape();
    let mut buf = Vec::with_capacity(CACHE_HEADER_LEN + 4 * (n * d + n));
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&(d as u64).to_le_bytes());
    buf.extend_from_slice(&(ds.num_classes() as u32).to_le_bytes());
    for &v in ds.features.as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &y in ds.labels.labels() {
        buf.extend_from_slice(&(y as i32).to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// `k_c` unit-variance Gaussian clusters in `d` dimensions with balanced
/// labels (`label_i = i mod k_c`).
///
/// Class `c` is centred at `separation · s·e_{c mod d}` with `s = +1` for
/// `c < d` and `s = −1` otherwise, so up to `2d` classes get distinct means.
pub fn synth_blobs(
    n: usize,
    num_classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    blobs_from_stream(n, num_classes, dim, separation, seed, Purpose::Synth)
}

pub(crate) fn blobs_from_stream(
    n: usize,
    num_classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
    purpose: Purpose,
) -> Result<LabeledDataset> {
    if num_classes < 2 || n < num_classes {
        return Err(Error::invalid(format!(
            "blobs need n >= k_c >= 2 (n={n}, k_c={num_classes})"
        )));
    }
    if dim == 0 || num_classes > 2 * dim {
        return Err(Error::invalid(format!(
            "blobs need 1 <= d and k_c <= 2d (d={dim}, k_c={num_classes})"
        )));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::invalid(format!("separation must be >= 0, got {separation}")));
    }
    let mut rng = stream(seed, purpose, 0);
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        let axis = c % dim;
        let sign = if c < dim { 1.0 } else { -1.0 };
        for j in 0..dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let mean = if j == axis { sign * separation } else { 0.0 };
            features.push(mean + noise);
        }
        labels.push(c);
    }
    LabeledDataset::new(
        DenseMatrix::from_vec_unchecked(n, dim, features),
        LabelVector::new(labels, num_classes)?,
        format!("blobs-k{num_classes}-d{dim}-s{separation}"),
    )
}

/// Seeded permutation of `0..n` split into `(train, val)` index lists with
/// `⌊n·val_fraction⌋` validation indices.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "val_fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    let n_val = (n as f64 * val_fraction).floor() as usize;
    if n_val == 0 || n_val >= n {
        return Err(Error::invalid(format!(
            "splitting {n} samples at {val_fraction} leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, Purpose::Split, 0));
    let train = order.split_off(n_val);
    Ok((train, order))
}

/// Seeded shuffle-then-split into `(train, val)`.
pub fn train_val_split(
    ds: &LabeledDataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let (train, val) = split_indices(ds.len(), val_fraction, seed)?;
    Ok((ds.subset(&train), ds.subset(&val)))
}
