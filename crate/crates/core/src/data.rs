//! Datasets: MNIST IDX files and a seeded synthetic image set.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::tensor::{Shape, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.shape().n != labels.len() {
            bail!(ShapeMismatch, "{} images but {} labels", images.shape().n, labels.len());
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            bail!(OutOfRange, "label {} not below class count {}", bad, classes);
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (self.images.gather_batch(indices), indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images.slice_batch(0, n),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        }
    }

    /// Raw little-endian bytes of images then labels, for determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.images.data().len() * 4 + self.labels.len() * 8);
        for v in self.images.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u64).to_le_bytes());
        }
        out
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => Err(Error::Format {
            offset: offset as u64,
            msg: "file ends inside the header".into(),
        }),
    }
}

fn check_magic(bytes: &[u8], want: u32) -> Result<()> {
    let magic = read_u32(bytes, 0)?;
    if magic != want {
        return Err(Error::Format {
            offset: 0,
            msg: format!("magic 0x{magic:08x}, expected 0x{want:08x}"),
        });
    }
    Ok(())
}

fn payload(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    if bytes.len() < start + len {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("payload truncated: expected {} bytes from offset {}", len, start),
        });
    }
    if bytes.len() > start + len {
        return Err(Error::Format {
            offset: (start + len) as u64,
            msg: "trailing bytes after payload".into(),
        });
    }
    Ok(&bytes[start..start + len])
}

/// Parses an IDX image file; pixels scale to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let h = read_u32(bytes, 8)? as usize;
    let w = read_u32(bytes, 12)? as usize;
    let data = payload(bytes, 16, n * h * w)?;
    Tensor::from_vec(Shape::new(n, 1, h, w), data.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    Ok(payload(bytes, 8, n)?.iter().map(|&b| b as usize).collect())
}

pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = parse_idx_images(&std::fs::read(images)?)?;
    let lab = parse_idx_labels(&std::fs::read(labels)?)?;
    Dataset::new(img, lab, 10)
}

/// Oriented sinusoidal gratings, one orientation/frequency pair per class,
/// with per-sample phase and contrast jitter and pixel noise. Sample `i`
/// has label `i mod classes`.
pub fn gen_synthetic(seed: u64, n: usize, classes: usize, size: usize) -> Result<Dataset> {
    if classes == 0 || n < classes {
        bail!(InvalidArgument, "need at least one sample per class ({} samples, {} classes)", n, classes);
    }
    if size == 0 {
        bail!(InvalidArgument, "image size must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).expect("valid std");
    let orientations = classes.div_ceil(2).max(1);
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let theta = std::f64::consts::PI * (k % orientations) as f64 / orientations as f64;
        let freq = if k / orientations == 0 { 3.0 } else { 6.0 };
        let phase = 0.9 * k as f64 + rng.random_range(-0.4..0.4);
        let contrast = rng.random_range(0.3..0.5);
        let (s, c) = theta.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 * c + y as f64 * s) / size as f64;
                let v = 0.5 + contrast * (2.0 * std::f64::consts::PI * freq * u + phase).sin() + noise.sample(&mut rng);
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        labels.push(k);
    }
    Dataset::new(Tensor::from_vec(Shape::new(n, 1, size, size), data)?, labels, classes)
}

/// Where training and evaluation data come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        #[serde(default)]
        seed: u64,
        train: usize,
        test: usize,
        #[serde(default = "ten")]
        classes: usize,
        #[serde(default = "thirty_two")]
        size: usize,
    },
    MnistIdx {
        train_images: String,
        train_labels: String,
        test_images: String,
        test_labels: String,
    },
}

fn ten() -> usize {
    10
}

fn thirty_two() -> usize {
    32
}

impl DatasetSource {
    /// Loads `(train, test)`; relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSource::Synthetic {
                seed,
                train,
                test,
                classes,
                size,
            } => Ok((
                gen_synthetic(*seed, *train, *classes, *size)?,
                gen_synthetic(seed.wrapping_add(0x9e37_79b9), *test, *classes, *size)?,
            )),
            DatasetSource::MnistIdx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => Ok((
                load_mnist_idx(&base.join(train_images), &base.join(train_labels))?,
                load_mnist_idx(&base.join(test_images), &base.join(test_labels))?,
            )),
        }
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        match self {
            DatasetSource::Synthetic { size, .. } => Some((*size, *size)),
            DatasetSource::MnistIdx { .. } => Some((28, 28)),
        }
    }
}
