//! Datasets: synthetic generators and IDX-format ingestion.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(FedError::shape("dataset", images.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(FedError::Config(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Dataset { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &i in indices {
            h[self.labels[i]] += 1;
        }
        h
    }

    /// Images and labels for `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (self.images.gather_rows(indices), indices.iter().map(|&i| self.labels[i]).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SyntheticKind {
    /// Class-dependent mean image plus i.i.d. Gaussian pixel noise.
    GaussianBlobs,
    /// Sinusoidal stripes; the class sets orientation and frequency.
    StripePatterns,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub classes: usize,
    pub samples: usize,
    pub channels: usize,
    pub image_size: usize,
    /// Pixel noise standard deviation.
    pub sigma: f64,
}

/// Balanced synthetic dataset; `split` selects an independent draw that
/// shares the same class prototypes (0 for train, 1 for test, ...).
/// Class mean image: per channel, a background level plus one Gaussian
/// bump with its own center, width and amplitude.
fn blob_prototype(channels: usize, size: usize, seed: u64, class: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, &[rng::TAG_DATA, class as u64]);
    let s = size as f64;
    let mut out = Vec::with_capacity(channels * size * size);
    for _ in 0..channels {
        let level = r.random_range(0.0..0.5);
        let amp = r.random_range(0.5..1.0);
        let (cy, cx) = (r.random_range(0.0..s), r.random_range(0.0..s));
        let width = r.random_range(0.15 * s..0.35 * s);
        for y in 0..size {
            for x in 0..size {
                let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                out.push(level + amp * (-d2 / (2.0 * width * width)).exp());
            }
        }
    }
    out
}

pub fn gen_synthetic_split(spec: &SyntheticSpec, seed: u64, split: u64) -> Result<Dataset> {
    if spec.classes < 2 || spec.samples < spec.classes {
        return Err(FedError::Config(format!(
            "synthetic dataset needs at least 2 classes and samples >= classes (got {} samples, {} classes)",
            spec.samples, spec.classes
        )));
    }
    if spec.channels == 0 || spec.image_size == 0 || !(spec.sigma >= 0.0) {
        return Err(FedError::Config("synthetic dataset dimensions must be positive and sigma >= 0".into()));
    }
    let (c, s) = (spec.channels, spec.image_size);
    let pixels = c * s * s;
    let mut order_rng = rng::stream(seed, &[rng::TAG_DATA, split, u64::MAX]);
    let mut labels: Vec<usize> = (0..spec.samples).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut order_rng);

    let noise = Normal::new(0.0, spec.sigma).map_err(|e| FedError::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(spec.samples * pixels);
    match spec.kind {
        SyntheticKind::GaussianBlobs => {
            let prototypes: Vec<Vec<f64>> = (0..spec.classes).map(|k| blob_prototype(c, s, seed, k)).collect();
            let mut r = rng::stream(seed, &[rng::TAG_DATA, split, 1]);
            for &l in &labels {
                data.extend(prototypes[l].iter().map(|&m| m + noise.sample(&mut r)));
            }
        }
        SyntheticKind::StripePatterns => {
            let mut r = rng::stream(seed, &[rng::TAG_DATA, split, 2]);
            for &l in &labels {
                let theta = std::f64::consts::PI * l as f64 / spec.classes as f64;
                let freq = 1.0 + (l % 2) as f64;
                let phase = r.random_range(0.0..std::f64::consts::TAU);
                for _ in 0..c {
                    for y in 0..s {
                        for x in 0..s {
                            let u = (x as f64 * theta.cos() + y as f64 * theta.sin()) / s as f64;
                            let v = 0.5 + 0.5 * (std::f64::consts::TAU * freq * u + phase).sin();
                            data.push(v + noise.sample(&mut r));
                        }
                    }
                }
            }
        }
    }
    Dataset::new(Tensor::new(vec![spec.samples, c, s, s], data)?, labels, spec.classes)
}

pub fn gen_synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    gen_synthetic_split(spec, seed, 0)
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> IdxReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(FedError::IdxTruncated(format!(
                "{} file needs {} more bytes at offset {}",
                self.what,
                n - (self.bytes.len() - self.pos),
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn be_u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses an IDX image file: `(N, H, W, pixel bytes)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut r = IdxReader { bytes, pos: 0, what: "image" };
    let magic = r.be_u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(FedError::IdxMagic { expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let (n, h, w) = (r.be_u32()? as usize, r.be_u32()? as usize, r.be_u32()? as usize);
    let pixels = r.take(n * h * w)?.to_vec();
    Ok((n, h, w, pixels))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = IdxReader { bytes, pos: 0, what: "label" };
    let magic = r.be_u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(FedError::IdxMagic { expected: IDX_LABELS_MAGIC, found: magic });
    }
    let n = r.be_u32()? as usize;
    Ok(r.take(n)?.to_vec())
}

/// Builds a single-channel dataset from IDX image and label bytes. Pixels
/// are scaled to `[0, 1]` by `/255`. The class count is the largest label
/// plus one unless `num_classes` is given.
pub fn dataset_from_idx(images: &[u8], labels: &[u8], num_classes: Option<usize>) -> Result<Dataset> {
    let (n, h, w, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(FedError::IdxCountMismatch { images: n, labels: labels.len() });
    }
    let data = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(Tensor::new(vec![n, 1, h, w], data)?, labels, classes)
}

pub fn load_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| FedError::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| FedError::io(labels_path, e))?;
    dataset_from_idx(&images, &labels, None)
}

/// Encodes a single-channel dataset as IDX `(images, labels)` byte buffers.
/// Pixels are rounded to the nearest `k/255` and clamped to `[0, 1]`.
pub fn dataset_to_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let [c, h, w] = ds.sample_shape();
    if c != 1 {
        return Err(FedError::Config(format!("IDX export needs 1 channel, dataset has {c}")));
    }
    if ds.num_classes > 256 {
        return Err(FedError::Config("IDX labels are single bytes".into()));
    }
    let n = ds.len();
    let mut images = Vec::with_capacity(16 + n * h * w);
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [n, h, w] {
        images.extend_from_slice(&(d as u32).to_be_bytes());
    }
    images.extend(ds.images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    labels.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((images, labels))
}

pub fn write_idx_dataset(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (images, labels) = dataset_to_idx(ds)?;
    crate::harness::output::write_atomic(images_path, &images)?;
    crate::harness::output::write_atomic(labels_path, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, h: u32, w: u32, px: &[u8]) -> Vec<u8> {
        let mut v = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for d in [n, h, w] {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v.extend_from_slice(px);
        v
    }

    fn idx_labels(ls: &[u8]) -> Vec<u8> {
        let mut v = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        v.extend_from_slice(&(ls.len() as u32).to_be_bytes());
        v.extend_from_slice(ls);
        v
    }

    #[test]
    fn byte_scaling() {
        let ds = dataset_from_idx(&idx_images(1, 2, 2, &[0, 255, 0, 255]), &idx_labels(&[1]), None).unwrap();
        assert_eq!(ds.images.shape(), &[1, 1, 2, 2]);
        assert_eq!(ds.images.data(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(ds.num_classes, 2);
    }

    #[test]
    fn distinct_errors() {
        let imgs = idx_images(2, 1, 1, &[3, 4]);
        assert!(matches!(
            dataset_from_idx(&imgs, &idx_labels(&[0]), None),
            Err(FedError::IdxCountMismatch { images: 2, labels: 1 })
        ));
        assert!(matches!(
            dataset_from_idx(&idx_labels(&[0]), &idx_labels(&[0]), None),
            Err(FedError::IdxMagic { .. })
        ));
        assert!(matches!(
            dataset_from_idx(&imgs[..imgs.len() - 1], &idx_labels(&[0, 1]), None),
            Err(FedError::IdxTruncated(_))
        ));
    }

    #[test]
    fn synthetic_is_balanced_and_replayable() {
        let spec = SyntheticSpec {
            kind: SyntheticKind::StripePatterns,
            classes: 4,
            samples: 40,
            channels: 1,
            image_size: 6,
            sigma: 0.1,
        };
        let a = gen_synthetic_dataset(&spec, 9).unwrap();
        assert_eq!(a.class_histogram(&(0..40).collect::<Vec<_>>()), vec![10; 4]);
        assert_eq!(a, gen_synthetic_dataset(&spec, 9).unwrap());
        assert_ne!(a, gen_synthetic_dataset(&spec, 10).unwrap());
        let too_few = SyntheticSpec { samples: 3, ..spec };
        assert!(gen_synthetic_dataset(&too_few, 0).is_err());
    }
}
