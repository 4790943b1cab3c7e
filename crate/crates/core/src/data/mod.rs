//! MNIST IDX ingestion, synthetic matrices and seeded mini-batch streams.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{random_normal, RngStream, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: u32,
    pub dims: Vec<usize>,
}

impl IdxHeader {
    fn len(&self) -> usize {
        4 + 4 * self.dims.len()
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(offset, "truncated IDX header"))
}

/// Parses and validates an IDX header and payload length.
pub fn parse_idx(bytes: &[u8], expect_magic: u32) -> Result<(IdxHeader, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != expect_magic {
        return Err(Error::format(
            0,
            format!("bad IDX magic {magic:#010x}, expected {expect_magic:#010x}"),
        ));
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims)
        .map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = IdxHeader { magic, dims };
    let start = header.len();
    let n: usize = header.dims.iter().product();
    if bytes.len() < start + n {
        return Err(Error::format(
            bytes.len(),
            format!(
                "truncated IDX payload: need {n} bytes after header, have {}",
                bytes.len() - start
            ),
        ));
    }
    if bytes.len() > start + n {
        return Err(Error::format(start + n, "trailing bytes after IDX payload"));
    }
    Ok((header, &bytes[start..]))
}

/// Encodes unsigned-byte images as IDX (`magic 0x803`).
pub fn encode_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), count * rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [count, rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

/// Encodes labels as IDX (`magic 0x801`).
pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Images `n × 1 × H × W` scaled to `[0, 1]`, labels in `0..=9`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[1] != 1 {
            return Err(Error::dim(format!(
                "images must be n×1×H×W, got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 9) {
            return Err(Error::param(format!("label {bad} outside 0..=9")));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.images.len() / self.len()
    }

    /// Copies the selected samples into a batch tensor.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("gather shape"), labels)
    }

    /// The first `n` samples.
    pub fn truncate(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.gather(&idx);
        Dataset { images, labels }
    }
}

/// Loads an IDX image/label pair, scaling pixels by 1/255.
pub fn load_mnist(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let img_bytes = fs::read(images)?;
    let lbl_bytes = fs::read(labels)?;
    parse_mnist(&img_bytes, &lbl_bytes)
}

pub fn parse_mnist(img_bytes: &[u8], lbl_bytes: &[u8]) -> Result<Dataset> {
    let (ih, pixels) = parse_idx(img_bytes, IDX_IMAGES_MAGIC)?;
    let (lh, raw_labels) = parse_idx(lbl_bytes, IDX_LABELS_MAGIC)?;
    let &[n, rows, cols] = ih.dims.as_slice() else {
        unreachable!("magic fixes three image dims");
    };
    if lh.dims[0] != n {
        return Err(Error::format(
            4,
            format!("{n} images but {} labels", lh.dims[0]),
        ));
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::format(4, "empty IDX image set"));
    }
    if let Some(pos) = raw_labels.iter().position(|&l| l > 9) {
        return Err(Error::format(
            lh.len() + pos,
            format!("label {} outside 0..=9", raw_labels[pos]),
        ));
    }
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let images = Tensor::new(vec![n, 1, rows, cols], data)?;
    Dataset::new(images, raw_labels.iter().map(|&l| l as usize).collect())
}

/// The standard MNIST file names inside `dir`.
pub fn mnist_paths(dir: &Path, train: bool) -> (std::path::PathBuf, std::path::PathBuf) {
    let prefix = if train { "train" } else { "t10k" };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// `m × n` matrix with i.i.d. N(0, 1) entries.
pub fn synthetic_gaussian(rng: &mut RngStream, m: usize, n: usize) -> Result<Tensor> {
    if m == 0 || n == 0 {
        return Err(Error::param("synthetic matrix dims must be >= 1"));
    }
    random_normal(rng, &[m, n], 0.0, 1.0)
}

/// Ten random `side × side` templates plus per-sample noise, clamped to
/// `[0, 1]`. Templates depend only on `seed`; `split` picks the sample draw,
/// so different splits share classes but not samples.
pub fn synthetic_digits(seed: u64, split: u64, n: usize, side: usize) -> Result<Dataset> {
    if n == 0 || side == 0 {
        return Err(Error::param("synthetic dataset needs n >= 1 and side >= 1"));
    }
    let px = side * side;
    let mut trng = RngStream::new(seed).derive(u64::MAX);
    let templates: Vec<f64> = (0..10 * px).map(|_| trng.uniform(0.0, 1.0)).collect();
    let mut rng = RngStream::new(seed).derive(split);
    let mut data = Vec::with_capacity(n * px);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = (rng.next_u64() % 10) as usize;
        labels.push(c);
        for &t in &templates[c * px..(c + 1) * px] {
            data.push((t + 0.35 * rng.standard_normal()).clamp(0.0, 1.0));
        }
    }
    Dataset::new(Tensor::new(vec![n, 1, side, side], data)?, labels)
}

/// Endless stream of shuffled mini-batch index sets. Each epoch draws its
/// permutation from `master.derive(epoch)`; the ragged tail is dropped.
#[derive(Clone, Debug)]
pub struct BatchStream {
    n: usize,
    batch_size: usize,
    master: RngStream,
    epoch: u64,
    perm: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    pub fn new(n: usize, batch_size: usize, master: RngStream) -> Result<Self> {
        if batch_size == 0 || batch_size > n {
            return Err(Error::param(format!(
                "batch size {batch_size} invalid for dataset of {n}"
            )));
        }
        let mut s = BatchStream {
            n,
            batch_size,
            master,
            epoch: 0,
            perm: Vec::new(),
            pos: 0,
        };
        s.start_epoch();
        Ok(s)
    }

    fn start_epoch(&mut self) {
        self.perm = (0..self.n).collect();
        self.master.derive(self.epoch).shuffle(&mut self.perm);
        self.pos = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n / self.batch_size
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.batch_size > self.n {
            self.epoch += 1;
            self.start_epoch();
        }
        let b = &self.perm[self.pos..self.pos + self.batch_size];
        self.pos += self.batch_size;
        b
    }
}

/// Convenience: the first epoch's batches for a dataset.
pub fn batches(dataset: &Dataset, batch_size: usize, rng: &RngStream) -> Result<Vec<Vec<usize>>> {
    let mut s = BatchStream::new(dataset.len(), batch_size, rng.clone())?;
    Ok((0..s.batches_per_epoch())
        .map(|_| s.next_batch().to_vec())
        .collect())
}
