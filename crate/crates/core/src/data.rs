//! Datasets: IDX image files (the MNIST container format), per-channel
//! normalization fitted on training data, simple train-time augmentation, and
//! a deterministic synthetic task generator whose difficulty is tunable.
//!
//! The synthetic task is oriented-grating classification: class k is a cosine
//! grating at angle pi*k/K. At difficulty 0 every sample of a class is the
//! same template plus light noise, so a single matched filter solves it; as
//! difficulty rises the grating phase becomes random per sample and the noise
//! grows, which demands several phase-shifted detectors per orientation —
//! i.e. genuinely wider layers.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Dataset> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                lhs: images.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        for &l in &labels {
            if l >= num_classes {
                return Err(Error::LabelOutOfRange { label: l, classes: num_classes });
            }
        }
        Ok(Dataset { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn input_shape(&self) -> [usize; 3] {
        [self.images.shape()[1], self.images.shape()[2], self.images.shape()[3]]
    }

    /// Gather the samples at `indices` into one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.input_shape();
        let sample = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * sample);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.images.feature(i));
            labels.push(self.labels[i]);
        }
        (
            Tensor::from_vec(&[indices.len(), c, h, w], data).expect("sized above"),
            labels,
        )
    }

    /// Sequential image-only batches (labels dropped), for statistics passes.
    pub fn image_batches(&self, batch_size: usize) -> Vec<Tensor> {
        let mut out = Vec::new();
        let mut start = 0;
        while start < self.len() {
            let end = (start + batch_size).min(self.len());
            let indices: Vec<usize> = (start..end).collect();
            out.push(self.batch(&indices).0);
            start = end;
        }
        out
    }
}

/// Per-channel affine normalization `(x - mean) / std`, fitted on training
/// images only and then applied unchanged to any split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(train: &Dataset) -> Normalizer {
        let [c, h, w] = train.input_shape();
        let n = train.len();
        let per = (n * h * w) as f64;
        let mut mean = vec![0.0; c];
        let mut sumsq = vec![0.0; c];
        let id = train.images.data();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for s in 0..h * w {
                    let v = id[base + s];
                    mean[ci] += v;
                    sumsq[ci] += v * v;
                }
            }
        }
        for m in &mut mean {
            *m /= per;
        }
        let std: Vec<f64> = (0..c)
            .map(|ci| (sumsq[ci] / per - mean[ci] * mean[ci]).max(0.0).sqrt().max(1e-8))
            .collect();
        Normalizer { mean, std }
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        let [c, h, w] = ds.input_shape();
        if c != self.mean.len() {
            return Err(Error::ShapeMismatch {
                op: "normalize",
                lhs: vec![c],
                rhs: vec![self.mean.len()],
            });
        }
        let mut images = ds.images.clone();
        let id = images.data_mut();
        for ni in 0..ds.len() {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for s in 0..h * w {
                    id[base + s] = (id[base + s] - self.mean[ci]) / self.std[ci];
                }
            }
        }
        Dataset::new(images, ds.labels.clone(), ds.num_classes)
    }
}

fn read_u32_be(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

/// Load an IDX image file (magic 0x00000803, big-endian header, u8 pixels)
/// as a `[N, 1, H, W]` tensor with pixels scaled to [0, 1].
pub fn load_idx_images(path: &Path) -> Result<Tensor> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Idx(format!("{}: {e}", path.display())))?;
    let mut r = std::io::BufReader::new(file);
    let magic = read_u32_be(&mut r)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Idx(format!(
            "{}: magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x} (images)",
            path.display()
        )));
    }
    let n = read_u32_be(&mut r)? as usize;
    let h = read_u32_be(&mut r)? as usize;
    let w = read_u32_be(&mut r)? as usize;
    let mut pixels = vec![0u8; n * h * w];
    r.read_exact(&mut pixels).map_err(|e| {
        Error::Idx(format!("{}: truncated pixel data ({e})", path.display()))
    })?;
    let data: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Tensor::from_vec(&[n, 1, h, w], data)
}

/// Load an IDX label file (magic 0x00000801).
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Idx(format!("{}: {e}", path.display())))?;
    let mut r = std::io::BufReader::new(file);
    let magic = read_u32_be(&mut r)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Idx(format!(
            "{}: magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x} (labels)",
            path.display()
        )));
    }
    let n = read_u32_be(&mut r)? as usize;
    let mut labels = vec![0u8; n];
    r.read_exact(&mut labels).map_err(|e| {
        Error::Idx(format!("{}: truncated label data ({e})", path.display()))
    })?;
    Ok(labels.into_iter().map(|l| l as usize).collect())
}

/// Write images `[N, 1, H, W]` (values clamped to [0, 1]) as an IDX file.
pub fn write_idx_images(path: &Path, images: &Tensor) -> Result<()> {
    use std::io::Write;
    if images.rank() != 4 || images.shape()[1] != 1 {
        return Err(Error::InvalidArg(format!(
            "IDX images must be [N, 1, H, W], got {:?}",
            images.shape()
        )));
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    for dim in [images.shape()[0], images.shape()[2], images.shape()[3]] {
        w.write_all(&(dim as u32).to_be_bytes())?;
    }
    let bytes: Vec<u8> = images
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    for &l in labels {
        if l > u8::MAX as usize {
            return Err(Error::InvalidArg(format!("label {l} exceeds IDX u8 range")));
        }
        w.write_all(&[l as u8])?;
    }
    Ok(())
}

/// Load the four-file MNIST layout from a directory:
/// `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
/// `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = Dataset::new(
        load_idx_images(&dir.join("train-images-idx3-ubyte"))?,
        load_idx_labels(&dir.join("train-labels-idx1-ubyte"))?,
        10,
    )?;
    let test = Dataset::new(
        load_idx_images(&dir.join("t10k-images-idx3-ubyte"))?,
        load_idx_labels(&dir.join("t10k-labels-idx1-ubyte"))?,
        10,
    )?;
    Ok((train, test))
}

/// Train-time augmentation: optional horizontal flips (p = 1/2 per sample)
/// and random translations up to `max_shift` pixels per axis, zero-filled.
/// Draw order per sample: flip (if enabled), dy, dx (if `max_shift > 0`).
pub fn augment_batch(images: &Tensor, rng: &mut Rng, flip: bool, max_shift: usize) -> Tensor {
    if !flip && max_shift == 0 {
        return images.clone();
    }
    let (n, c, h, w) = (
        images.shape()[0],
        images.shape()[1],
        images.shape()[2],
        images.shape()[3],
    );
    let mut out = Tensor::zeros(images.shape());
    let id = images.data();
    let od = out.data_mut();
    for ni in 0..n {
        let do_flip = flip && rng.flip(0.5);
        let (dy, dx) = if max_shift > 0 {
            (rng.offset(max_shift), rng.offset(max_shift))
        } else {
            (0, 0)
        };
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for y in 0..h as isize {
                let sy = y - dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w as isize {
                    let sx0 = x - dx;
                    if sx0 < 0 || sx0 >= w as isize {
                        continue;
                    }
                    let sx = if do_flip { w as isize - 1 - sx0 } else { sx0 };
                    od[base + (y as usize) * w + x as usize] =
                        id[base + (sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Parameters of the synthetic oriented-grating task. The dataset is a pure
/// function of this struct, so different training seeds see the same data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub classes: usize,
    pub image_size: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// 0 = fixed-phase, near-noiseless templates; 1 = fully random phase and
    /// strong noise.
    pub difficulty: f64,
    /// Seed for dataset generation, independent of any training seed.
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("synthetic task needs at least 2 classes".into()));
        }
        if self.image_size < 4 {
            return Err(Error::Config("synthetic image size must be at least 4".into()));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("synthetic task needs train and test samples".into()));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(Error::Config(format!(
                "difficulty must be in [0, 1], got {}",
                self.difficulty
            )));
        }
        Ok(())
    }
}

/// Cycles of the grating across the image.
const GRATING_FREQ: f64 = 2.5;

fn grating_sample(
    spec: &SyntheticTaskSpec,
    rng: &mut Rng,
    class: usize,
    buf: &mut [f64],
) {
    let s = spec.image_size;
    let theta = std::f64::consts::PI * class as f64 / spec.classes as f64;
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let phase = spec.difficulty * rng.uniform(-std::f64::consts::PI, std::f64::consts::PI);
    let sigma = 0.05 + 0.45 * spec.difficulty;
    let half = (s as f64 - 1.0) / 2.0;
    for y in 0..s {
        for x in 0..s {
            let u = ((x as f64 - half) * cos_t + (y as f64 - half) * sin_t) / s as f64;
            let g = (2.0 * std::f64::consts::PI * GRATING_FREQ * u + phase).cos();
            let noisy = 0.5 + 0.35 * g + rng.normal(0.0, sigma);
            buf[y * s + x] = noisy.clamp(0.0, 1.0);
        }
    }
}

/// Generate (train, test) splits of the grating task. Labels cycle through
/// the classes, so splits are balanced up to one sample.
pub fn gen_synthetic(spec: &SyntheticTaskSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let s = spec.image_size;
    let total = spec.n_train + spec.n_test;
    let mut images = Tensor::zeros(&[total, 1, s, s]);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let class = i % spec.classes;
        grating_sample(spec, &mut rng, class, images.feature_mut(i));
        labels.push(class);
    }
    let split = |range: std::ops::Range<usize>| -> Result<Dataset> {
        let mut data = Vec::with_capacity(range.len() * s * s);
        for i in range.clone() {
            data.extend_from_slice(images.feature(i));
        }
        Dataset::new(
            Tensor::from_vec(&[range.len(), 1, s, s], data)?,
            labels[range].to_vec(),
            spec.classes,
        )
    };
    Ok((split(0..spec.n_train)?, split(spec.n_train..total)?))
}
