//! Datasets: synthetic blobs, MNIST IDX files and CIFAR-10 binary batches.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR10_RECORDS_PER_BATCH: usize = 10_000;
pub const CIFAR10_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
const CIFAR10_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR10_TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, class_count: usize, split: Split) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::dim(format!("images must be [N, C, H, W], got {:?}", images.shape())));
        }
        if images.rows() != labels.len() {
            return Err(Error::dim(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: class_count,
            });
        }
        Ok(Self {
            images,
            labels,
            class_count,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one example.
    pub fn example_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Copies the examples at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let per = self.images.row_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::dim(format!("index {i} out of {} examples", self.len())));
            }
            data.extend_from_slice(self.images.row(i));
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// A seeded random subset of `n` examples (all of them if `n >= len`).
    pub fn subset(&self, n: usize, seed: u64) -> Result<Self> {
        if n >= self.len() {
            return Ok(self.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, self.len(), n).into_vec();
        idx.sort_unstable();
        let (images, labels) = self.gather(&idx)?;
        Self::new(images, labels, self.class_count, self.split)
    }

    /// Splits off the last `n_test` examples as a test split.
    pub fn split_off(mut self, n_test: usize) -> Result<(Self, Self)> {
        if n_test == 0 || n_test >= self.len() {
            return Err(Error::Config(format!(
                "cannot hold out {n_test} of {} examples",
                self.len()
            )));
        }
        let keep = self.len() - n_test;
        let train_idx: Vec<usize> = (0..keep).collect();
        let test_idx: Vec<usize> = (keep..self.len()).collect();
        let (ti, tl) = self.gather(&test_idx)?;
        let test = Self::new(ti, tl, self.class_count, Split::Test)?;
        let (ri, rl) = self.gather(&train_idx)?;
        self.images = ri;
        self.labels = rl;
        self.split = Split::Train;
        Ok((self, test))
    }

    pub fn standardize(&mut self, stats: &ChannelStats) -> Result<()> {
        let [c, h, w] = self.example_shape();
        if stats.mean.len() != c {
            return Err(Error::dim(format!(
                "{} channel statistics for {c} channels",
                stats.mean.len()
            )));
        }
        let plane = h * w;
        for (i, v) in self.images.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = ((*v as f64 - stats.mean[ch]) / stats.std[ch]) as f32;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Per-channel mean and population standard deviation. Constant channels
    /// get a unit standard deviation.
    pub fn compute(ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let [c, h, w] = ds.example_shape();
        let plane = h * w;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (i, &v) in ds.images.data().iter().enumerate() {
            let ch = (i / plane) % c;
            sum[ch] += v as f64;
            sq[ch] += (v as f64) * (v as f64);
        }
        let n = (ds.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n - m * m).max(0.0);
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }
}

/// Standardizes both splits with statistics of the training split.
pub fn standardize_pair(train: &mut Dataset, test: &mut Dataset) -> Result<ChannelStats> {
    let stats = ChannelStats::compute(train)?;
    train.standardize(&stats)?;
    test.standardize(&stats)?;
    Ok(stats)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| parse_err(path, format!("truncated header at byte {offset}")))
}

/// Parses an IDX image file: magic, count, rows, cols, then `u8` pixels.
pub fn parse_idx_images<'a>(bytes: &'a [u8], path: &Path) -> Result<(usize, usize, usize, &'a [u8])> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(parse_err(path, format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| parse_err(path, "image dimensions overflow"))?;
    let body = &bytes[16..];
    if body.len() != need {
        return Err(parse_err(
            path,
            format!("expected {need} pixel bytes for {n}x{rows}x{cols}, found {}", body.len()),
        ));
    }
    Ok((n, rows, cols, body))
}

/// Parses an IDX label file: magic, count, then `u8` labels.
pub fn parse_idx_labels<'a>(bytes: &'a [u8], path: &Path) -> Result<&'a [u8]> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(parse_err(path, format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(parse_err(path, format!("expected {n} labels, found {}", body.len())));
    }
    Ok(body)
}

/// Loads an MNIST-format image/label pair with pixels scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let ib = read_file(images)?;
    let lb = read_file(labels)?;
    let (n, rows, cols, pixels) = parse_idx_images(&ib, images)?;
    let raw_labels = parse_idx_labels(&lb, labels)?;
    if raw_labels.len() != n {
        return Err(parse_err(
            labels,
            format!("{} labels for {n} images", raw_labels.len()),
        ));
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let tensor = Tensor::new(vec![n, 1, rows, cols], data)?;
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= 10) {
        return Err(parse_err(images, format!("label {bad} outside 0..10")));
    }
    Dataset::new(tensor, labels, 10, split)
}

/// Parses `records` CIFAR-10 records of one label byte followed by the R, G
/// and B planes (32x32 each, row-major).
pub fn parse_cifar10_records(bytes: &[u8], records: usize, path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    let expected = records * CIFAR10_RECORD_BYTES;
    if bytes.len() != expected {
        return Err(parse_err(
            path,
            format!("expected {expected} bytes ({records} records), found {}", bytes.len()),
        ));
    }
    let mut pixels = Vec::with_capacity(records * (CIFAR10_RECORD_BYTES - 1));
    let mut labels = Vec::with_capacity(records);
    for rec in bytes.chunks_exact(CIFAR10_RECORD_BYTES) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(parse_err(path, format!("label {label} outside 0..10")));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
    }
    Ok((pixels, labels))
}

fn load_cifar10_files(dir: &Path, files: &[&str], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        let path: PathBuf = dir.join(name);
        let bytes = read_file(&path)?;
        let (p, l) = parse_cifar10_records(&bytes, CIFAR10_RECORDS_PER_BATCH, &path)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, 10, split)
}

/// Loads the five training batches and the test batch from `dir`.
pub fn load_cifar10_binary(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_cifar10_files(dir, &CIFAR10_TRAIN_FILES, Split::Train)?;
    let test = load_cifar10_files(dir, &[CIFAR10_TEST_FILE], Split::Test)?;
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Render {
    /// `[N, 2, 1, 1]` points.
    Vector,
    /// `[N, 1, 8, 8]` images of a Gaussian bump at the point.
    Raster,
}

/// Radius of the circle the class means sit on.
pub const BLOB_RADIUS: f64 = 2.0;
const RASTER: usize = 8;

/// Gaussian blobs: class `c` is centered at angle `2 pi c / classes` on a
/// circle of radius 2, with isotropic noise of standard deviation `noise`.
/// Examples are interleaved by class.
pub fn make_synthetic(
    classes: usize,
    n_per_class: usize,
    noise: f64,
    seed: u64,
    render: Render,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    if n_per_class == 0 {
        return Err(Error::EmptyDataset);
    }
    if !(noise >= 0.0) {
        return Err(Error::Config(format!("noise must be >= 0, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = classes * n_per_class;
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n_per_class {
        for c in 0..classes {
            let (mx, my) = class_mean(c, classes);
            let dx: f64 = rng.sample(StandardNormal);
            let dy: f64 = rng.sample(StandardNormal);
            points.push((mx + noise * dx, my + noise * dy));
            labels.push(c);
        }
    }
    let images = match render {
        Render::Vector => Tensor::new(
            vec![n, 2, 1, 1],
            points.iter().flat_map(|&(x, y)| [x as f32, y as f32]).collect(),
        )?,
        Render::Raster => {
            let mut data = Vec::with_capacity(n * RASTER * RASTER);
            for &(x, y) in &points {
                data.extend(rasterize(x, y));
            }
            Tensor::new(vec![n, 1, RASTER, RASTER], data)?
        }
    };
    Dataset::new(images, labels, classes, Split::Train)
}

pub fn class_mean(c: usize, classes: usize) -> (f64, f64) {
    let a = 2.0 * PI * c as f64 / classes as f64;
    (BLOB_RADIUS * a.cos(), BLOB_RADIUS * a.sin())
}

/// Maps `[-3, 3]^2` onto the pixel grid and draws a unit-height bump.
fn rasterize(x: f64, y: f64) -> impl Iterator<Item = f32> {
    let scale = (RASTER - 1) as f64 / 6.0;
    let (px, py) = ((x + 3.0) * scale, (3.0 - y) * scale);
    (0..RASTER * RASTER).map(move |i| {
        let (r, c) = ((i / RASTER) as f64, (i % RASTER) as f64);
        let d2 = (c - px).powi(2) + (r - py).powi(2);
        (-d2 / 2.0).exp() as f32
    })
}

/// Seeded epoch-wise batching. The permutation of epoch `e` depends only on
/// `(seed, e)`, so a run can resume at any epoch boundary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchIterator {
    pub len: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchIterator {
    pub fn new(len: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Self> {
        if len == 0 {
            return Err(Error::EmptyDataset);
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        let mut it = Self {
            len,
            batch_size,
            seed,
            shuffle,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        it.start_epoch(0);
        Ok(it)
    }

    pub fn start_epoch(&mut self, epoch: u64) {
        self.epoch = epoch;
        self.cursor = 0;
        self.order = (0..self.len).collect();
        if self.shuffle {
            let mut rng = epoch_rng(self.seed, epoch);
            self.order.shuffle(&mut rng);
        }
    }

    /// Indices of the next batch of the current epoch; the last batch may be
    /// short. `None` once the epoch is exhausted.
    pub fn next_indices(&mut self) -> Option<&[usize]> {
        if self.cursor >= self.len {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.len);
        let out = &self.order[self.cursor..end];
        self.cursor = end;
        Some(out)
    }

    pub fn next_batch(&mut self, data: &Dataset) -> Option<Result<(Tensor<f32>, Vec<usize>)>> {
        if data.len() != self.len {
            return Some(Err(Error::dim(format!(
                "iterator over {} examples used with a dataset of {}",
                self.len,
                data.len()
            ))));
        }
        let idx = self.next_indices()?.to_vec();
        Some(data.gather(&idx))
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }
}

/// Independent stream per `(seed, epoch)`.
pub fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1));
    rng
}

/// Random horizontal flip and pad-4 random crop, in place on `[B, C, H, W]`.
pub fn augment<R: Rng + ?Sized>(batch: &mut Tensor<f32>, rng: &mut R) {
    const PAD: i64 = 4;
    let s = batch.shape().to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    let per = c * h * w;
    for b in 0..s[0] {
        let flip = rng.random_bool(0.5);
        let dy = rng.random_range(-PAD..=PAD);
        let dx = rng.random_range(-PAD..=PAD);
        let src = batch.row(b).to_vec();
        let dst = &mut batch.data_mut()[b * per..(b + 1) * per];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as i64 + dy;
                    let mut sx = x as i64 + dx;
                    if flip {
                        sx = w as i64 - 1 - sx;
                    }
                    let v = if (0..h as i64).contains(&sy) && (0..w as i64).contains(&sx) {
                        src[(ch * h + sy as usize) * w + sx as usize]
                    } else {
                        0.0
                    };
                    dst[(ch * h + y) * w + x] = v;
                }
            }
        }
    }
}
