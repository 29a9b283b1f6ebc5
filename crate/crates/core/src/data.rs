//! Dataset ingestion: IDX (MNIST), CIFAR-10 binary batches and a synthetic
//! Gaussian-cluster task.
//!
//! Images are (N,H,W,C) in [0,1]; [`Dataset::standardize`] then rescales each
//! channel with statistics from the training split only.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RngState, Tensor};

pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const CIFAR_RECORD_LEN: usize = 3073;
const CIFAR_SIDE: usize = 32;

/// Decoded contents of an IDX file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Idx {
    Labels(Vec<u8>),
    Images {
        count: usize,
        rows: usize,
        cols: usize,
        pixels: Vec<u8>,
    },
}

fn fmt_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let b = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| fmt_err(offset, "truncated header"))?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn parse_idx(bytes: &[u8]) -> Result<Idx> {
    let magic = read_u32(bytes, 0)?;
    let rank = match magic {
        IDX_LABELS_MAGIC => 1,
        IDX_IMAGES_MAGIC => 3,
        other => return Err(fmt_err(0, format!("bad IDX magic 0x{other:08X}"))),
    };
    let dims = (0..rank)
        .map(|i| read_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * rank;
    let expected: usize = dims.iter().product();
    let body = &bytes[start..];
    if body.len() < expected {
        return Err(fmt_err(
            start + body.len(),
            format!("truncated payload: expected {expected} bytes, found {}", body.len()),
        ));
    }
    if body.len() > expected {
        return Err(fmt_err(start + expected, "trailing bytes after payload"));
    }
    Ok(match rank {
        1 => Idx::Labels(body.to_vec()),
        _ => Idx::Images {
            count: dims[0],
            rows: dims[1],
            cols: dims[2],
            pixels: body.to_vec(),
        },
    })
}

/// Images as (N,rows,cols,1) scaled by 1/255; labels as a rank-1 tensor of
/// raw byte values.
pub fn load_idx(path: &Path) -> Result<Tensor> {
    match parse_idx(&fs::read(path)?)? {
        Idx::Labels(l) => Tensor::new(&[l.len()], l.iter().map(|&v| f64::from(v)).collect()),
        Idx::Images {
            count,
            rows,
            cols,
            pixels,
        } => Tensor::new(&[count, rows, cols, 1], pixels.iter().map(|&p| f64::from(p) / 255.0).collect()),
    }
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn encode_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != count * rows * cols {
        return Err(Error::dim("encode_idx_images", &[count, rows, cols], &[pixels.len()]));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [count, rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Decodes CIFAR-10 binary records: one label byte, then 32x32 planes for
/// R, G and B. Returns (N,32,32,3) images in [0,1] and labels.
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Tensor, Vec<usize>)> {
    if bytes.len() % CIFAR_RECORD_LEN != 0 {
        let record = bytes.len() / CIFAR_RECORD_LEN;
        return Err(fmt_err(
            record * CIFAR_RECORD_LEN,
            format!("truncated record {record}: file length {} is not a multiple of {CIFAR_RECORD_LEN}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut images = vec![0.0; n * plane * 3];
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks(CIFAR_RECORD_LEN).enumerate() {
        labels.push(usize::from(rec[0]));
        let px = &rec[1..];
        let dst = &mut images[r * plane * 3..(r + 1) * plane * 3];
        for c in 0..3 {
            for p in 0..plane {
                dst[p * 3 + c] = f64::from(px[c * plane + p]) / 255.0;
            }
        }
    }
    Ok((Tensor::new(&[n, CIFAR_SIDE, CIFAR_SIDE, 3], images)?, labels))
}

pub fn encode_cifar10(labels: &[u8], planar_pixels: &[u8]) -> Result<Vec<u8>> {
    let per = CIFAR_RECORD_LEN - 1;
    if planar_pixels.len() != labels.len() * per {
        return Err(Error::dim("encode_cifar10", &[labels.len(), per], &[planar_pixels.len()]));
    }
    let mut out = Vec::with_capacity(labels.len() * CIFAR_RECORD_LEN);
    for (l, px) in labels.iter().zip(planar_pixels.chunks(per)) {
        out.push(*l);
        out.extend_from_slice(px);
    }
    Ok(out)
}

/// Concatenates the records of several CIFAR-10 batch files.
pub fn load_cifar10_binary(paths: &[PathBuf]) -> Result<(Tensor, Vec<usize>)> {
    let mut bytes = Vec::new();
    for p in paths {
        let chunk = fs::read(p)?;
        if chunk.len() % CIFAR_RECORD_LEN != 0 {
            // Re-parse alone so the error names the record within this file.
            return parse_cifar10(&chunk).map_err(|e| Error::Data(format!("{}: {e}", p.display())));
        }
        bytes.extend(chunk);
    }
    parse_cifar10(&bytes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Synthetic,
    Mnist,
    Cifar10,
}

/// Images and labels with a train/test split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub id: DatasetId,
    pub train_x: Tensor,
    pub train_y: Vec<usize>,
    pub test_x: Tensor,
    pub test_y: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(
        id: DatasetId,
        (train_x, train_y): (Tensor, Vec<usize>),
        (test_x, test_y): (Tensor, Vec<usize>),
        num_classes: usize,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Data(format!("need at least 2 classes, got {num_classes}")));
        }
        for (x, y, split) in [(&train_x, &train_y, "train"), (&test_x, &test_y, "test")] {
            if x.rank() != 4 || x.shape()[0] != y.len() {
                return Err(Error::Data(format!(
                    "{split} split: images {:?} do not match {} labels",
                    x.shape(),
                    y.len()
                )));
            }
            if let Some((i, &l)) = y.iter().enumerate().find(|(_, &l)| l >= num_classes) {
                return Err(Error::Data(format!(
                    "{split} split: label {l} at index {i} is outside [0, {num_classes})"
                )));
            }
        }
        if train_x.shape()[1..] != test_x.shape()[1..] {
            return Err(Error::Data(format!(
                "train images {:?} and test images {:?} differ in shape",
                train_x.shape(),
                test_x.shape()
            )));
        }
        Ok(Self {
            id,
            train_x,
            train_y,
            test_x,
            test_y,
            num_classes,
        })
    }

    /// (H, W, C) of one sample.
    pub fn input_shape(&self) -> [usize; 3] {
        let s = self.train_x.shape();
        [s[1], s[2], s[3]]
    }

    /// Keeps the first `train` and `test` samples of each split.
    pub fn truncate(mut self, train: Option<usize>, test: Option<usize>) -> Result<Self> {
        if let Some(n) = train.filter(|&n| n < self.train_y.len()) {
            self.train_x = self.train_x.slice_outer(0, n)?;
            self.train_y.truncate(n);
        }
        if let Some(n) = test.filter(|&n| n < self.test_y.len()) {
            self.test_x = self.test_x.slice_outer(0, n)?;
            self.test_y.truncate(n);
        }
        Ok(self)
    }

    /// Average-pools both splits with a `factor` x `factor` window.
    pub fn pool(mut self, factor: usize) -> Result<Self> {
        self.train_x = avg_pool(&self.train_x, factor)?;
        self.test_x = avg_pool(&self.test_x, factor)?;
        Ok(self)
    }

    /// Per-channel mean and (biased) std over the training split.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.train_x.shape()[3];
        let n = (self.train_x.len() / c) as f64;
        let mut mean = vec![0.0; c];
        for px in self.train_x.data().chunks(c) {
            mean.iter_mut().zip(px).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for px in self.train_x.data().chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(px).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        (mean, var.into_iter().map(|v| (v / n).sqrt()).collect())
    }

    /// Standardizes every channel of both splits with training statistics.
    pub fn standardize(mut self) -> Result<Self> {
        let (mean, std) = self.channel_stats();
        if let Some(c) = std.iter().position(|&s| s == 0.0) {
            return Err(Error::Data(format!("channel {c} is constant in the training split")));
        }
        let c = mean.len();
        for x in [&mut self.train_x, &mut self.test_x] {
            for (i, v) in x.data_mut().iter_mut().enumerate() {
                *v = (*v - mean[i % c]) / std[i % c];
            }
        }
        Ok(self)
    }
}

/// Non-overlapping `factor` x `factor` average pooling of (N,H,W,C) images.
pub fn avg_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    let s = x.shape();
    if x.rank() != 4 || factor == 0 || s[1] % factor != 0 || s[2] % factor != 0 {
        return Err(Error::Parameter(format!("cannot pool {s:?} by {factor}")));
    }
    let (n, h, w, c) = (s[0], s[1] / factor, s[2] / factor, s[3]);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; n * h * w * c];
    for b in 0..n {
        for i in 0..s[1] {
            for j in 0..s[2] {
                let src = ((b * s[1] + i) * s[2] + j) * c;
                let dst = ((b * h + i / factor) * w + j / factor) * c;
                for k in 0..c {
                    out[dst + k] += x.data()[src + k] * inv;
                }
            }
        }
    }
    Tensor::new(&[n, h, w, c], out)
}

fn labels_from(t: &Tensor) -> Vec<usize> {
    t.data().iter().map(|&v| v as usize).collect()
}

/// `train-*` and `t10k-*` IDX files under `dir`.
pub fn load_mnist(dir: &Path) -> Result<Dataset> {
    let read = |name: &str| load_idx(&dir.join(name));
    let train = (read("train-images-idx3-ubyte")?, labels_from(&read("train-labels-idx1-ubyte")?));
    let test = (read("t10k-images-idx3-ubyte")?, labels_from(&read("t10k-labels-idx1-ubyte")?));
    Dataset::new(DatasetId::Mnist, train, test, 10)
}

/// `data_batch_{1..5}.bin` and `test_batch.bin` under `dir`.
pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    let train = load_cifar10_binary(&train)?;
    let test = load_cifar10_binary(&[dir.join("test_batch.bin")])?;
    Dataset::new(DatasetId::Cifar10, train, test, 10)
}

/// Dataset root: `NORMLAB_DATA_DIR` if set, else `fallback`.
pub fn data_root(fallback: Option<&Path>) -> PathBuf {
    std::env::var_os("NORMLAB_DATA_DIR")
        .map(PathBuf::from)
        .or_else(|| fallback.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("data"))
}

pub fn mnist_dir(root: &Path) -> PathBuf {
    root.join("mnist")
}

pub fn cifar10_dir(root: &Path) -> PathBuf {
    root.join("cifar-10-batches-bin")
}

/// `k` Gaussian clusters in `shape`-sized inputs with unit noise.
///
/// Centers are random orthonormal directions scaled so every pair lies 4
/// noise standard deviations apart (when the input dimension is at least `k`).
/// Labels are balanced and shuffled; the first 80% form the training split.
pub fn synthetic_dataset(n: usize, shape: [usize; 3], k: usize, rng: &mut RngState) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::Data(format!("synthetic data needs at least 2 classes, got {k}")));
    }
    if n < k {
        return Err(Error::Data(format!("synthetic data needs n >= k, got n = {n}, k = {k}")));
    }
    let d: usize = shape.iter().product();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        if centers.len() < d {
            for c in &centers {
                let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        centers.push(v);
    }
    let scale = 4.0 / std::f64::consts::SQRT_2;
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    rng.shuffle(&mut labels);
    let mut data = Vec::with_capacity(n * d);
    for &l in &labels {
        data.extend(centers[l].iter().map(|c| scale * c + rng.standard_normal()));
    }
    let x = Tensor::new(&[n, shape[0], shape[1], shape[2]], data)?;
    let n_train = (n * 4).div_ceil(5);
    let train = (x.slice_outer(0, n_train)?, labels[..n_train].to_vec());
    let test = (x.slice_outer(n_train, n)?, labels[n_train..].to_vec());
    Dataset::new(DatasetId::Synthetic, train, test, k)
}

/// Which dataset to load and how to shrink it to desk scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub id: DatasetId,
    /// Keep only the first samples of the training split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
    /// Average-pooling factor applied to every image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<usize>,
    /// Directory holding the files; `NORMLAB_DATA_DIR` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Total samples for the synthetic task (default 2000).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    /// (H, W, C) for the synthetic task (default 8x8x1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 3]>,
    /// Classes for the synthetic task (default 10).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
}

impl DatasetSpec {
    pub fn new(id: DatasetId) -> Self {
        Self {
            id,
            train_limit: None,
            test_limit: None,
            pool: None,
            dir: None,
            samples: None,
            shape: None,
            classes: None,
        }
    }

    /// (H, W, C) of one sample after pooling, known without loading any file.
    pub fn sample_shape(&self) -> Result<[usize; 3]> {
        let [h, w, c] = match self.id {
            DatasetId::Synthetic => self.shape.unwrap_or([8, 8, 1]),
            DatasetId::Mnist => [28, 28, 1],
            DatasetId::Cifar10 => [32, 32, 3],
        };
        match self.pool.unwrap_or(1) {
            0 => Err(Error::Config("pool factor must be >= 1".into())),
            f if h % f != 0 || w % f != 0 => Err(Error::Config(format!("pool factor {f} does not divide {h}x{w}"))),
            f => Ok([h / f, w / f, c]),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.id {
            DatasetId::Synthetic => self.classes.unwrap_or(10),
            DatasetId::Mnist | DatasetId::Cifar10 => 10,
        }
    }

    /// Loads, shrinks and standardizes the dataset.
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        let root = data_root(self.dir.as_deref());
        let raw = match self.id {
            DatasetId::Synthetic => synthetic_dataset(
                self.samples.unwrap_or(2000),
                self.shape.unwrap_or([8, 8, 1]),
                self.classes.unwrap_or(10),
                &mut RngState::new(seed),
            )?,
            DatasetId::Mnist => load_mnist(&mnist_dir(&root))?,
            DatasetId::Cifar10 => load_cifar10(&cifar10_dir(&root))?,
        };
        let mut d = raw.truncate(self.train_limit, self.test_limit)?;
        if let Some(f) = self.pool.filter(|&f| f > 1) {
            d = d.pool(f)?;
        }
        d.standardize()
    }
}
