//! Dataset ingestion: CIFAR-10 binary files and deterministic synthetic
//! generators. Pixel values are normalized to [0, 1].

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::io::Read;
use std::path::Path;

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3 * 32 * 32 pixels
const CIFAR_CLASSES: usize = 10;

/// A labeled image set: `[n, c, h, w]` images, integer class labels.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub provenance: String,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape (channels, h, w) without the batch dim.
    pub fn sample_shape(&self) -> Vec<usize> {
        self.images.shape()[1..].to_vec()
    }

    /// Rows `indices` as a batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor<T> {
        let feat: usize = self.images.shape().iter().skip(1).product();
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * feat);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * feat..(i + 1) * feat]);
        }
        Tensor::new(shape, data).expect("batch shape consistent")
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if self.images.shape()[0] != self.labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                self.images.shape()[0],
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {} classes",
                self.classes
            )));
        }
        Ok(())
    }
}

/// Load one CIFAR-10 binary batch file (3073-byte records: one label byte
/// then 3072 channel-planar RGB bytes). `limit = 0` loads every record.
pub fn load_cifar10<T: Scalar>(path: &Path, limit: usize) -> Result<Dataset<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() % CIFAR_RECORD != 0 {
        let valid = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(Error::Format(format!(
            "{}: truncated record at byte offset {valid} (file length {} is not a \
             multiple of {CIFAR_RECORD})",
            path.display(),
            bytes.len()
        )));
    }
    let available = bytes.len() / CIFAR_RECORD;
    let n = if limit == 0 {
        available
    } else {
        limit.min(available)
    };
    if n == 0 {
        return Err(Error::Data(format!("{}: no records", path.display())));
    }
    let scale = T::from_f64(1.0 / 255.0);
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3072);
    for r in 0..n {
        let rec = &bytes[r * CIFAR_RECORD..(r + 1) * CIFAR_RECORD];
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format(format!(
                "{}: label byte {label} at offset {} exceeds {}",
                path.display(),
                r * CIFAR_RECORD,
                CIFAR_CLASSES - 1
            )));
        }
        labels.push(label);
        data.extend(rec[1..].iter().map(|&b| T::from_f64(b as f64) * scale));
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, 3, 32, 32], data)?,
        labels,
        classes: CIFAR_CLASSES,
        provenance: format!("cifar10:{}", path.display()),
    })
}

/// Write a dataset of `[n, 3, 32, 32]` images as a CIFAR-10 binary batch
/// file (pixels quantized to bytes).
pub fn write_cifar10<T: Scalar>(path: &Path, data: &Dataset<T>) -> Result<()> {
    let (n, c, h, w) = data.images.dims4()?;
    if (c, h, w) != (3, 32, 32) {
        return Err(Error::Argument(format!(
            "CIFAR-10 records are 3x32x32, dataset is {c}x{h}x{w}"
        )));
    }
    let mut bytes = Vec::with_capacity(n * CIFAR_RECORD);
    for i in 0..n {
        bytes.push(data.labels[i] as u8);
        let img = &data.images.data()[i * 3072..(i + 1) * 3072];
        bytes.extend(
            img.iter()
                .map(|&p| (p.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Two separable 2-D Gaussian clusters, one per class. Features live in
/// [0, 1] and are stored as `[n, 2, 1, 1]` images.
pub fn gen_two_clusters<T: Scalar>(n: usize, seed: u64) -> Result<Dataset<T>> {
    if n < 2 {
        return Err(Error::Argument("two_clusters needs n >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = [(0.3, 0.7), (0.7, 0.3)];
    let sigma = 0.06;
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let (cx, cy) = centers[class];
        let x = (cx + gauss(&mut rng) * sigma).clamp(0.0, 1.0);
        let y = (cy + gauss(&mut rng) * sigma).clamp(0.0, 1.0);
        data.push(T::from_f64(x));
        data.push(T::from_f64(y));
        labels.push(class);
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, 2, 1, 1], data)?,
        labels,
        classes: 2,
        provenance: format!("two_clusters:n={n}:seed={seed}"),
    })
}

/// Shape of the block-classes generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockClassesCfg {
    pub classes: usize,
    /// Channel groups; class `k` carries its signal in block `k % groups`.
    pub groups: usize,
    pub block_channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for BlockClassesCfg {
    fn default() -> Self {
        BlockClassesCfg {
            classes: 4,
            groups: 2,
            block_channels: 2,
            height: 6,
            width: 6,
        }
    }
}

/// Images whose informative channel block depends on the class group:
/// class `k` has a class-specific mean pattern in channel block
/// `k % groups` and pure noise elsewhere. Exercises routing
/// specialization.
pub fn gen_block_classes<T: Scalar>(
    n: usize,
    cfg: BlockClassesCfg,
    seed: u64,
) -> Result<Dataset<T>> {
    if n < 2 {
        return Err(Error::Argument("block_classes needs n >= 2".into()));
    }
    if cfg.groups == 0 || cfg.classes == 0 || cfg.block_channels == 0 {
        return Err(Error::Argument(
            "block_classes needs classes, groups and block_channels >= 1".into(),
        ));
    }
    let channels = cfg.groups * cfg.block_channels;
    let hw = cfg.height * cfg.width;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // per-class mean pattern over its informative block
    let patterns: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| {
            (0..cfg.block_channels * hw)
                .map(|_| rng.random_range(0.25..0.75))
                .collect()
        })
        .collect();
    let noise_sigma = 0.08;
    let mut data = Vec::with_capacity(n * channels * hw);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % cfg.classes;
        let block = class % cfg.groups;
        for c in 0..channels {
            for p in 0..hw {
                let base = if c / cfg.block_channels == block {
                    patterns[class][(c % cfg.block_channels) * hw + p]
                } else {
                    0.5
                };
                let v = (base + gauss(&mut rng) * noise_sigma).clamp(0.0, 1.0);
                data.push(T::from_f64(v));
            }
        }
        labels.push(class);
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, channels, cfg.height, cfg.width], data)?,
        labels,
        classes: cfg.classes,
        provenance: format!(
            "block_classes:n={n}:k={}:g={}:seed={seed}",
            cfg.classes, cfg.groups
        ),
    })
}

/// Deterministic 10-class 3x32x32 image set with CIFAR-like difficulty:
/// each class is an oriented color grating with randomized phase,
/// amplitude, position and pixel noise. Stands in for CIFAR-10 where the
/// real binaries are unavailable; records round-trip through the CIFAR
/// reader/writer.
pub fn gen_cifar_like<T: Scalar>(n: usize, seed: u64) -> Result<Dataset<T>> {
    if n < 2 {
        return Err(Error::Argument("cifar_like needs n >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = 10;
    // fixed per-class signature: orientation, frequency, channel mix
    let class_params: Vec<(f64, f64, [f64; 3])> = (0..classes)
        .map(|k| {
            let theta = std::f64::consts::PI * (k as f64) / (classes as f64);
            let freq = 2.0 + (k % 5) as f64;
            let mix = [
                rng.random_range(-1.0..1.0f64),
                rng.random_range(-1.0..1.0f64),
                rng.random_range(-1.0..1.0f64),
            ];
            (theta, freq, mix)
        })
        .collect();
    let mut data = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let (theta, freq, mix) = class_params[class];
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let amp = rng.random_range(0.25..0.45);
        let bg = rng.random_range(0.3..0.6);
        let (dy, dx) = (
            rng.random_range(-3.0..3.0f64),
            rng.random_range(-3.0..3.0f64),
        );
        let (cos_t, sin_t) = (theta.cos(), theta.sin());
        for ch in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let u = ((x as f64 + dx) * cos_t + (y as f64 + dy) * sin_t) / 32.0;
                    let wave = (std::f64::consts::TAU * freq * u + phase).sin();
                    let noise = gauss(&mut rng) * 0.08;
                    let v = (bg + amp * mix[ch] * wave + noise).clamp(0.0, 1.0);
                    data.push(T::from_f64(v));
                }
            }
        }
        labels.push(class);
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, 3, 32, 32], data)?,
        labels,
        classes,
        provenance: format!("cifar_like:n={n}:seed={seed}"),
    })
}

/// Standard normal via Box-Muller (keeps the generator's byte stream the
/// only source of randomness).
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
