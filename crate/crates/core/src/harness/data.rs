//! Procedural toy datasets and the CIFAR binary loader.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images `[M, C, H, W]` with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub x: Tensor<f32>,
    pub y: Vec<usize>,
}

impl Split {
    pub fn new(x: Tensor<f32>, y: Vec<usize>) -> Result<Self> {
        if x.shape().len() != 4 || x.shape()[0] != y.len() {
            return Err(Error::shape("split", format!("{:?} images for {} labels", x.shape(), y.len())));
        }
        Ok(Split { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Result<Split> {
        Ok(Split { x: self.x.select_outer(rows)?, y: rows.iter().map(|&r| self.y[r]).collect() })
    }

    /// First `n` samples (or all, if fewer).
    pub fn head(&self, n: usize) -> Result<Split> {
        let n = n.min(self.len());
        Ok(Split { x: self.x.slice_outer(0, n)?, y: self.y[..n].to_vec() })
    }
}

/// Per-channel affine normalization `(x - mean) / std`, fit on the train
/// split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelNorm {
    pub fn fit(x: &Tensor<f32>) -> Result<Self> {
        let s = x.shape();
        if s.len() != 4 || s[0] == 0 {
            return Err(Error::shape("channel_norm", format!("expected non-empty [N,C,H,W], got {s:?}")));
        }
        let (n, c, inner) = (s[0], s[1], s[2] * s[3]);
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (i, chunk) in x.data().chunks(inner).enumerate() {
            let ch = i % c;
            for &v in chunk {
                sum[ch] += v as f64;
                sq[ch] += (v as f64) * (v as f64);
            }
        }
        let count = (n * inner) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| ((q / count - m * m).max(0.0).sqrt()).max(1e-6) as f32).collect();
        Ok(ChannelNorm { mean: mean.into_iter().map(|m| m as f32).collect(), std })
    }

    pub fn apply(&self, x: &mut Tensor<f32>) {
        let (c, inner) = (x.shape()[1], x.shape()[2] * x.shape()[3]);
        for (i, chunk) in x.data_mut().chunks_mut(inner).enumerate() {
            let ch = i % c;
            let (m, s) = (self.mean[ch], self.std[ch]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub classes: usize,
    pub train: Split,
    pub test: Split,
    pub norm: ChannelNorm,
}

impl Dataset {
    /// Fits normalization on `train`, applies it to both splits.
    pub fn normalized(name: impl Into<String>, classes: usize, mut train: Split, mut test: Split) -> Result<Self> {
        let norm = ChannelNorm::fit(&train.x)?;
        norm.apply(&mut train.x);
        norm.apply(&mut test.x);
        let bad = train.y.iter().chain(&test.y).find(|&&l| l >= classes);
        if let Some(l) = bad {
            return Err(Error::Consistency(format!("label {l} outside [0, {classes})")));
        }
        Ok(Dataset { name: name.into(), classes, train, test, norm })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        let s = self.train.x.shape();
        [s[1], s[2], s[3]]
    }
}

pub const TOY_SIDE: usize = 16;
pub const TOY_CHANNELS: usize = 3;
/// Fraction of generated samples kept for training; the rest is the test
/// split.
pub const TRAIN_FRACTION: f64 = 0.8;

/// Procedural image classification data on `3 x 16 x 16` canvases.
///
/// `blobs4`: one Gaussian blob (sigma 2 px, center jittered by N(0, 1) px)
/// in quadrant `label` (0 top-left, 1 top-right, 2 bottom-left, 3
/// bottom-right), random per-sample color in `[0.5, 1]^3`, additive pixel
/// noise N(0, 0.1).
///
/// `rings2`: a centered ring of radius 3 (label 0) or 6 (label 1), width
/// 1 px, with the same color and noise model.
///
/// Labels are balanced (`i mod K`) and shuffled; the last 20% of samples
/// form the test split.
pub fn load_toy_dataset(name: &str, samples: usize, seed: u64) -> Result<Dataset> {
    let classes = match name {
        "blobs4" => 4,
        "rings2" => 2,
        _ => return Err(Error::Config(format!("unknown toy dataset `{name}` (expected blobs4 or rings2)"))),
    };
    let n_train = ((samples as f64) * TRAIN_FRACTION).round() as usize;
    if n_train < 2 || samples - n_train < 1 {
        return Err(Error::Config(format!("need at least 3 samples for a train/test split, got {samples}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);

    let side = TOY_SIDE as f32;
    let plane = TOY_SIDE * TOY_SIDE;
    let jitter = Normal::new(0.0f32, 1.0).unwrap();
    let noise = Normal::new(0.0f32, 0.1).unwrap();
    let mut data = Vec::with_capacity(samples * TOY_CHANNELS * plane);
    for &label in &labels {
        let color: [f32; TOY_CHANNELS] = std::array::from_fn(|_| rng.random_range(0.5..1.0));
        let shape: Vec<f32> = match name {
            "blobs4" => {
                let cx = if label % 2 == 0 { side * 0.25 } else { side * 0.75 } + jitter.sample(&mut rng);
                let cy = if label / 2 == 0 { side * 0.25 } else { side * 0.75 } + jitter.sample(&mut rng);
                (0..plane)
                    .map(|p| {
                        let (x, y) = ((p % TOY_SIDE) as f32 + 0.5, (p / TOY_SIDE) as f32 + 0.5);
                        (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * 4.0)).exp()
                    })
                    .collect()
            }
            _ => {
                let radius = if label == 0 { 3.0 } else { 6.0 };
                let c = side / 2.0;
                (0..plane)
                    .map(|p| {
                        let (x, y) = ((p % TOY_SIDE) as f32 + 0.5, (p / TOY_SIDE) as f32 + 0.5);
                        let r = ((x - c).powi(2) + (y - c).powi(2)).sqrt();
                        (-(r - radius).powi(2) / 2.0).exp()
                    })
                    .collect()
            }
        };
        for col in color {
            data.extend(shape.iter().map(|s| col * s + noise.sample(&mut rng)));
        }
    }
    let x = Tensor::new(vec![samples, TOY_CHANNELS, TOY_SIDE, TOY_SIDE], data)?;
    let train = Split::new(x.slice_outer(0, n_train)?, labels[..n_train].to_vec())?;
    let test = Split::new(x.slice_outer(n_train, samples - n_train)?, labels[n_train..].to_vec())?;
    Dataset::normalized(name, classes, train, test)
}

const CIFAR_PIXELS: usize = 3 * 32 * 32;

/// Expected record counts per file.
#[derive(Clone, Copy, Debug)]
pub struct CifarCounts {
    pub train_per_file: usize,
    pub test: usize,
}

impl CifarCounts {
    pub const STANDARD_10: CifarCounts = CifarCounts { train_per_file: 10_000, test: 10_000 };
    pub const STANDARD_100: CifarCounts = CifarCounts { train_per_file: 50_000, test: 10_000 };
}

/// Reads `count` records of `label_bytes + 3072` bytes; the label used is
/// the last label byte (the fine label for CIFAR-100).
fn read_cifar_file(path: &Path, label_bytes: usize, count: usize, x: &mut Vec<f32>, y: &mut Vec<usize>) -> Result<()> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let record = label_bytes + CIFAR_PIXELS;
    if bytes.len() != record * count {
        return Err(Error::Truncated(format!("{name}: {} bytes, expected {} records of {record} bytes", bytes.len(), count)));
    }
    for r in bytes.chunks_exact(record) {
        y.push(r[label_bytes - 1] as usize);
        x.extend(r[label_bytes..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(())
}

/// CIFAR-10 (`data_batch_{1..5}.bin`, `test_batch.bin`) or CIFAR-100
/// (`train.bin`, `test.bin`) binaries under `dir`, whichever is present.
pub fn load_cifar(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    if dir.join("train.bin").exists() {
        load_cifar_with(dir, 100, CifarCounts::STANDARD_100)
    } else {
        load_cifar_with(dir, 10, CifarCounts::STANDARD_10)
    }
}

/// As [`load_cifar`] with explicit variant and record counts.
pub fn load_cifar_with(dir: impl AsRef<Path>, variant: usize, counts: CifarCounts) -> Result<Dataset> {
    let dir = dir.as_ref();
    let (train_files, test_file, label_bytes): (Vec<String>, &str, usize) = match variant {
        10 => ((1..=5).map(|i| format!("data_batch_{i}.bin")).collect(), "test_batch.bin", 1),
        100 => (vec!["train.bin".into()], "test.bin", 2),
        _ => return Err(Error::Config(format!("CIFAR variant must be 10 or 100, got {variant}"))),
    };
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for f in &train_files {
        read_cifar_file(&dir.join(f), label_bytes, counts.train_per_file, &mut x, &mut y)?;
    }
    let n_train = y.len();
    let train = Split::new(Tensor::new(vec![n_train, 3, 32, 32], x)?, y)?;
    let (mut x, mut y) = (Vec::new(), Vec::new());
    read_cifar_file(&dir.join(test_file), label_bytes, counts.test, &mut x, &mut y)?;
    let test = Split::new(Tensor::new(vec![y.len(), 3, 32, 32], x)?, y)?;
    Dataset::normalized(format!("cifar{variant}"), variant, train, test)
}
