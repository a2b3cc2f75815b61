//! Datasets, seeded randomness, IDX parsing and mini-batching.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::matrix::{cholesky, matmul, Matrix};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Seeded generator: xoshiro256++ with its state expanded from the seed by
/// SplitMix64. Streams are identical on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: Xoshiro256PlusPlus,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Independent stream for `(seed, stream)`, e.g. one per epoch.
    pub fn derive(seed: u64, stream: u64) -> Self {
        Self::new(seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw by the Box–Muller transform.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Samples stored as columns of a `d x N` matrix.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Option<Vec<usize>>, classes: usize, split: Split) -> Result<Self> {
        if let Some(labels) = &labels {
            if labels.len() != features.cols() {
                return Err(Error::invalid(format!(
                    "{} labels for {} samples",
                    labels.len(),
                    features.cols()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
                return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
            }
        }
        Ok(Self {
            features,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.features.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.rows()
    }

    /// First `n` samples (or all, if fewer).
    pub fn truncate(mut self, n: usize) -> Self {
        if n < self.len() {
            let idx: Vec<usize> = (0..n).collect();
            self.features = self.features.select_columns(&idx);
            if let Some(l) = &mut self.labels {
                l.truncate(n);
            }
        }
        self
    }
}

/// `n` i.i.d. columns `L z` where `L L^T = sigma` and `z ~ N(0, I)`.
pub fn gen_correlated_gaussian(d: usize, n: usize, sigma: &Matrix, seed: u64) -> Result<Matrix> {
    if sigma.shape() != (d, d) {
        return Err(Error::shape("gen_correlated_gaussian", (d, d), sigma.shape()));
    }
    let l = cholesky(sigma)?;
    let mut rng = Rng::new(seed);
    let z = Matrix::from_fn(d, n, |_, _| rng.normal());
    matmul(&l, &z, None)
}

/// `d x d` matrix with unit diagonal and constant off-diagonal `rho`.
pub fn equicorrelation(d: usize, rho: f64) -> Matrix {
    Matrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { rho })
}

/// Gaussian blobs: class means drawn uniformly from `[-separation, separation]^d`,
/// within-class noise with equicorrelation `rho`.
pub fn gen_blobs(
    n: usize,
    dim: usize,
    classes: usize,
    separation: f64,
    rho: f64,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::invalid("blobs need at least two classes"));
    }
    let mut rng = Rng::new(seed);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.uniform_range(-separation, separation)).collect())
        .collect();
    // Means are shared between splits; samples use a split-specific stream.
    let sample_seed = seed ^ if split == Split::Train { 0x7472_6169_6e } else { 0x7465_7374 };
    let labels: Vec<usize> = {
        let mut r = Rng::new(sample_seed);
        (0..n).map(|_| (r.next_u64() % classes as u64) as usize).collect()
    };
    let noise = gen_correlated_gaussian(dim, n, &equicorrelation(dim, rho), sample_seed.wrapping_add(1))?;
    let features = Matrix::from_fn(dim, n, |r, c| means[labels[c]][r] + noise[(r, c)]);
    Dataset::new(features, Some(labels), classes, split)
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated {
            expected: at + 4,
            found: bytes.len(),
        })
}

/// IDX image file contents.
#[derive(Debug, Clone)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// `rows*cols x N`, pixels scaled to `[0, 1]`, each image flattened row-major.
    pub features: Matrix,
}

pub fn parse_idx_images(bytes: &[u8], limit: Option<usize>) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "IDX images: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let d = rows * cols;
    let expected = 16 + count * d;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if count == 0 || d == 0 {
        return Err(Error::Format("IDX images: empty file".into()));
    }
    let n = limit.map_or(count, |l| l.min(count));
    let pixels = &bytes[16..];
    let features = Matrix::from_fn(d, n, |p, i| f64::from(pixels[i * d + p]) / 255.0);
    Ok(IdxImages { rows, cols, features })
}

pub fn parse_idx_labels(bytes: &[u8], limit: Option<usize>) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "IDX labels: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
        )));
    }
    let count = be_u32(bytes, 4)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let n = limit.map_or(count, |l| l.min(count));
    Ok(bytes[8..8 + n].iter().map(|&b| usize::from(b)).collect())
}

/// Reads an IDX image file; gzip-compressed files are detected and inflated.
pub fn load_idx_images(path: impl AsRef<Path>, limit: Option<usize>) -> Result<IdxImages> {
    parse_idx_images(&read_maybe_gz(path.as_ref())?, limit)
}

pub fn load_idx_labels(path: impl AsRef<Path>, limit: Option<usize>) -> Result<Vec<usize>> {
    parse_idx_labels(&read_maybe_gz(path.as_ref())?, limit)
}

/// Loads an image/label file pair as a 10-class dataset.
pub fn load_idx_dataset(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    limit: Option<usize>,
    split: Split,
) -> Result<Dataset> {
    let images = load_idx_images(images, limit)?;
    let labels = load_idx_labels(labels, limit)?;
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    Dataset::new(images.features, Some(labels), classes, split)
}

/// Sample indices partitioned into batches of `batch_size`; the last batch
/// may be shorter. With `shuffle`, the permutation comes from
/// `Rng::derive(seed, epoch)`.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        Rng::derive(seed, epoch).shuffle(&mut order);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Matrix,
    pub labels: Option<Vec<usize>>,
}

pub fn batches(dataset: &Dataset, batch_size: usize, seed: u64, epoch: u64, shuffle: bool) -> Result<Vec<Batch>> {
    Ok(batch_indices(dataset.len(), batch_size, seed, epoch, shuffle)?
        .into_iter()
        .map(|idx| Batch {
            x: dataset.features.select_columns(&idx),
            labels: dataset.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        })
        .collect())
}
