//! In-memory labelled image sets: the procedural synthetic texture task, the
//! CIFAR-10 binary layout and the raw `IMGB` container.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::{SeededRng, Tensor};

pub const CIFAR_RECORD: usize = 3073;
pub const IMGB_MAGIC: &[u8; 4] = b"IMGB";

/// Images in `[0, 1]` as one `[N, C, H, W]` tensor, with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.batch() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{:?} images for {} labels", images.shape(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Format(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Format("pixel outside [0, 1]".into()));
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

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (
            self.images.select(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Contiguous sub-range `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let idx: Vec<usize> = (start..end.min(self.len())).collect();
        let (images, labels) = self.batch(&idx);
        Self {
            images,
            labels,
            num_classes: self.num_classes,
        }
    }

    /// First `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        (self.slice(0, n), self.slice(n, self.len()))
    }

    /// Same images with the labels permuted.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.images.clone(), labels, self.num_classes)
    }

    /// Consecutive batches of an order shuffled by `seed`; the last batch
    /// may be short.
    pub fn shuffled_batches(&self, batch: usize, seed: u64) -> Vec<Vec<usize>> {
        let order = SeededRng::new(seed).permutation(self.len());
        order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
    }

    /// Consecutive batches in storage order.
    pub fn batches(&self, batch: usize) -> Vec<Vec<usize>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
    }
}

/// Random `size x size` crop of each image, one offset per batch.
pub fn random_crop(x: &Tensor<f32>, size: usize, rng: &mut SeededRng) -> Result<Tensor<f32>> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if size == 0 || size > h || size > w {
        return Err(Error::invalid(format!("crop {size} does not fit {h}x{w}")));
    }
    if size == h && size == w {
        return Ok(x.clone());
    }
    let top = rng.below(h - size + 1);
    let left = rng.below(w - size + 1);
    let d = x.data();
    Tensor::new(
        vec![n, c, size, size],
        (0..n * c)
            .flat_map(|p| (0..size).flat_map(move |y| (0..size).map(move |xx| p * h * w + (top + y) * w + left + xx)))
            .map(|i| d[i])
            .collect(),
    )
}

/// Procedural texture task: each class is a sinusoidal grating with its
/// own orientation and frequency, laid over a random base colour with
/// pixel noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub count: usize,
    pub num_classes: usize,
    pub channels: usize,
    pub size: usize,
    pub amplitude: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 1000,
            num_classes: 10,
            channels: 3,
            size: 32,
            amplitude: 0.08,
            noise: 0.03,
            seed: 0,
        }
    }
}

/// Number of distinct grating orientations; classes beyond it reuse an
/// orientation at a higher frequency.
const ORIENTATIONS: usize = 5;

pub fn synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.num_classes == 0 || spec.channels == 0 || spec.size == 0 {
        return Err(Error::invalid("synthetic dataset needs classes, channels and size"));
    }
    let margin = spec.amplitude + spec.noise;
    if margin >= 0.5 {
        return Err(Error::invalid("amplitude + noise must stay below 0.5"));
    }
    let mut rng = SeededRng::new(spec.seed);
    let (c, s) = (spec.channels, spec.size);
    let mut data = Vec::with_capacity(spec.count * c * s * s);
    let mut labels = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let label = rng.below(spec.num_classes);
        let theta = PI * (label % ORIENTATIONS) as f64 / ORIENTATIONS as f64;
        let cycles = 2.0 + 2.0 * (label / ORIENTATIONS) as f64;
        let freq = 2.0 * PI * cycles / s as f64;
        let phase = rng.uniform(0.0, 2.0 * PI);
        let (dx, dy) = (theta.cos(), theta.sin());
        let base: Vec<f64> = (0..c).map(|_| rng.uniform(0.15 + margin, 0.85 - margin)).collect();
        for &b in &base {
            for y in 0..s {
                for x in 0..s {
                    let wave = (freq * (x as f64 * dx + y as f64 * dy) + phase).sin();
                    let v = b + spec.amplitude * wave + rng.uniform(-spec.noise, spec.noise);
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(Tensor::new(vec![spec.count, c, s, s], data)?, labels, spec.num_classes)
}

fn u8_to_unit(b: u8) -> f32 {
    b as f32 / 255.0
}

fn unit_to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Parses concatenated CIFAR-10 binary records (1 label byte, then 3072
/// channel-major pixel bytes).
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "CIFAR-10 data of {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3072);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| u8_to_unit(b)));
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], data)?, labels, 10)
}

/// CIFAR-10 split from a directory holding the standard `.bin` files, or
/// from a single record file.
pub fn load_cifar10(path: &Path, train: bool) -> Result<Dataset> {
    let files: Vec<_> = if path.is_dir() {
        if train {
            (1..=5).map(|i| path.join(format!("data_batch_{i}.bin"))).collect()
        } else {
            vec![path.join("test_batch.bin")]
        }
    } else {
        vec![path.to_path_buf()]
    };
    let mut bytes = Vec::new();
    for f in files {
        bytes.extend(fs::read(&f).map_err(|e| Error::io(&f, e))?);
    }
    parse_cifar10(&bytes)
}

/// Encodes a dataset as an `IMGB` container. Pixels are quantized to u8.
pub fn encode_imgb(ds: &Dataset) -> Result<Vec<u8>> {
    let [c, h, w] = ds.image_shape();
    let mut out = Vec::with_capacity(20 + ds.len() * (1 + c * h * w));
    out.extend_from_slice(IMGB_MAGIC);
    for v in [ds.len(), c, h, w] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &l in &ds.labels {
        let b = u8::try_from(l).map_err(|_| Error::Format(format!("label {l} does not fit in a byte")))?;
        out.push(b);
    }
    out.extend(ds.images.data().iter().map(|&v| unit_to_u8(v)));
    Ok(out)
}

pub fn decode_imgb(bytes: &[u8], num_classes: usize) -> Result<Dataset> {
    if bytes.len() < 20 || &bytes[..4] != IMGB_MAGIC {
        return Err(Error::Format("missing IMGB magic".into()));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (n, c, h, w) = (field(0), field(1), field(2), field(3));
    let pixels = n * c * h * w;
    if bytes.len() != 20 + n + pixels {
        return Err(Error::Format(format!(
            "IMGB body is {} bytes, header implies {}",
            bytes.len() - 20,
            n + pixels
        )));
    }
    let labels = bytes[20..20 + n].iter().map(|&b| b as usize).collect();
    let data = bytes[20 + n..].iter().map(|&b| u8_to_unit(b)).collect();
    Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, num_classes)
}

pub fn save_imgb(ds: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, &encode_imgb(ds)?)
}

pub fn load_imgb(path: &Path, num_classes: usize) -> Result<Dataset> {
    decode_imgb(&fs::read(path).map_err(|e| Error::io(path, e))?, num_classes)
}
