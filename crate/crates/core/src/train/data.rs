//! Datasets: seeded synthetic Gaussian blobs, IDX (MNIST-style) files and
//! CIFAR-10 binary batches.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Environment variable naming the root for relative dataset paths.
pub const DATA_DIR_ENV: &str = "EAST_DATA_DIR";

const MNIST_MEAN: f32 = 0.1307;
const MNIST_STD: f32 = 0.3081;
const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSpec {
    /// Class `k` samples are `separation·μ_k + noise·ε` with `ε ~ N(0, I)`.
    /// Centres `μ_k` are fixed per-channel sums of random plane waves.
    Synthetic {
        classes: usize,
        shape: [usize; 3],
        train: usize,
        test: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    /// `train-images-idx3-ubyte` and friends inside `dir`.
    Idx {
        dir: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
    /// `data_batch_{1..5}.bin` and `test_batch.bin` inside `dir`.
    Cifar {
        dir: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
}

fn default_separation() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    1.0
}

/// Images stored as normalised `f32`, one row of `C·H·W` per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shape: [usize; 3],
    pub classes: usize,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// Keeps the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.labels.truncate(n);
            self.images.truncate(n * self.sample_len());
        }
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Gathers samples `idx` into a `B×C×H×W` tensor plus labels.
    pub fn batch<T: Real>(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let d = self.sample_len();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend(self.images[i * d..(i + 1) * d].iter().map(|&v| T::from_f64(v as f64)));
        }
        let [c, h, w] = self.shape;
        let x = Tensor::new(&[idx.len(), c, h, w], data)?;
        Ok((x, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Index batches of one epoch, shuffled by `(seed, epoch)`.
    pub fn epoch_batches(&self, batch: usize, seed: u64, epoch: u64, shuffle: bool) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        if shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch + 1);
            idx.shuffle(&mut rng);
        }
        idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
    }
}

/// Train and test splits.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

/// Resolves a dataset path against `EAST_DATA_DIR` when relative.
pub fn resolve_dir(dir: &Path) -> PathBuf {
    if dir.is_absolute() {
        return dir.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) => PathBuf::from(root).join(dir),
        None => dir.to_path_buf(),
    }
}

pub fn load_dataset(spec: &DataSpec) -> Result<Splits> {
    match spec {
        DataSpec::Synthetic {
            classes,
            shape,
            train,
            test,
            separation,
            noise,
            seed,
        } => {
            let gen = Blobs::new(*classes, *shape, *separation, *noise, *seed)?;
            Ok(Splits {
                train: gen.sample(*train, 0),
                test: gen.sample(*test, 1),
            })
        }
        DataSpec::Idx { dir, limit } => {
            let dir = resolve_dir(dir);
            let mut train = read_idx_pair(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?;
            let test = read_idx_pair(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
            if let Some(n) = limit {
                train.truncate(*n);
            }
            Ok(Splits { train, test })
        }
        DataSpec::Cifar { dir, limit } => {
            let dir = resolve_dir(dir);
            let mut train = Dataset {
                shape: [3, 32, 32],
                classes: 10,
                images: Vec::new(),
                labels: Vec::new(),
            };
            for i in 1..=5 {
                let part = read_cifar(&dir.join(format!("data_batch_{i}.bin")))?;
                train.images.extend(part.images);
                train.labels.extend(part.labels);
            }
            let test = read_cifar(&dir.join("test_batch.bin"))?;
            if let Some(n) = limit {
                train.truncate(*n);
            }
            Ok(Splits { train, test })
        }
    }
}

/// Gaussian-blob generator with fixed class centres.
pub struct Blobs {
    classes: usize,
    shape: [usize; 3],
    noise: f64,
    centres: Vec<Vec<f64>>,
    seed: u64,
}

impl Blobs {
    pub fn new(classes: usize, shape: [usize; 3], separation: f64, noise: f64, seed: u64) -> Result<Self> {
        if classes < 2 || shape.contains(&0) || noise < 0.0 {
            return Err(Error::Config("synthetic data needs ≥ 2 classes, non-empty shape, noise ≥ 0".into()));
        }
        let [c, h, w] = shape;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centres = Vec::with_capacity(classes);
        for _ in 0..classes {
            let mut mu = vec![0.0; c * h * w];
            for ch in 0..c {
                for _ in 0..3 {
                    let u = rng.random_range(0..3) as f64;
                    let v = rng.random_range(0..3) as f64;
                    let phase = rng.random_range(0.0..2.0 * PI);
                    let amp: f64 = StandardNormal.sample(&mut rng);
                    for y in 0..h {
                        for x in 0..w {
                            let arg = 2.0 * PI * (u * y as f64 / h as f64 + v * x as f64 / w as f64) + phase;
                            mu[(ch * h + y) * w + x] += separation * amp * arg.cos() / 3f64.sqrt();
                        }
                    }
                }
            }
            centres.push(mu);
        }
        Ok(Self {
            classes,
            shape,
            noise,
            centres,
            seed,
        })
    }

    /// `n` samples with an exact label histogram (`n / K` each, the first
    /// `n mod K` classes one more), in shuffled order.
    pub fn sample(&self, n: usize, stream: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream + 1);
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.classes).collect();
        labels.shuffle(&mut rng);
        let d: usize = self.shape.iter().product();
        let mut images = Vec::with_capacity(n * d);
        for &l in &labels {
            for &m in &self.centres[l] {
                let e: f64 = StandardNormal.sample(&mut rng);
                images.push((m + self.noise * e) as f32);
            }
        }
        Dataset {
            shape: self.shape,
            classes: self.classes,
            images,
            labels,
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX header: `[0, 0, type, ndims]` then `ndims` big-endian u32.
fn idx_header(bytes: &[u8], want_dims: u8, path: &Path) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 || bytes[3] != want_dims {
        return Err(Error::Format(format!(
            "{}: bad IDX magic {:02x?}, expected unsigned-byte data with {want_dims} dims",
            path.display(),
            &bytes[..bytes.len().min(4)]
        )));
    }
    let nd = want_dims as usize;
    let head = 4 + 4 * nd;
    if bytes.len() < head {
        return Err(Error::Format(format!("{}: truncated IDX header", path.display())));
    }
    let dims: Vec<usize> = (0..nd)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let expected: usize = dims.iter().product();
    if bytes.len() - head != expected {
        return Err(Error::Format(format!(
            "{}: header promises {expected} bytes, file has {}",
            path.display(),
            bytes.len() - head
        )));
    }
    Ok((dims, head))
}

/// Reads an IDX image file and its label file.
pub fn read_idx_pair(images: &Path, labels: &Path) -> Result<Dataset> {
    let ib = read(images)?;
    let lb = read(labels)?;
    let (idims, ihead) = idx_header(&ib, 3, images)?;
    let (ldims, lhead) = idx_header(&lb, 1, labels)?;
    if idims[0] != ldims[0] {
        return Err(Error::Format(format!("{} images but {} labels", idims[0], ldims[0])));
    }
    let labels: Vec<usize> = lb[lhead..].iter().map(|&l| l as usize).collect();
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1).max(10);
    let images = ib[ihead..]
        .iter()
        .map(|&p| (p as f32 / 255.0 - MNIST_MEAN) / MNIST_STD)
        .collect();
    Ok(Dataset {
        shape: [1, idims[1], idims[2]],
        classes,
        images,
        labels,
    })
}

/// Reads one CIFAR-10 binary batch (`label, 3072 pixel bytes` per record).
pub fn read_cifar(path: &Path) -> Result<Dataset> {
    let bytes = read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "{}: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(Error::Format(format!("{}: label byte {} > 9", path.display(), rec[0])));
        }
        labels.push(rec[0] as usize);
        for (c, plane) in rec[1..].chunks(1024).enumerate() {
            images.extend(plane.iter().map(|&p| (p as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]));
        }
    }
    Ok(Dataset {
        shape: [3, 32, 32],
        classes: 10,
        images,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_with_exact_histogram() {
        let spec = DataSpec::Synthetic {
            classes: 10,
            shape: [3, 32, 32],
            train: 1000,
            test: 10,
            separation: 1.0,
            noise: 1.0,
            seed: 7,
        };
        let a = load_dataset(&spec).unwrap();
        let b = load_dataset(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.train.histogram(), vec![100; 10]);
        assert_eq!(a.train.images.len(), 1000 * 3072);
    }

    #[test]
    fn uneven_histogram_favours_low_classes() {
        let g = Blobs::new(3, [1, 2, 2], 1.0, 1.0, 0).unwrap();
        assert_eq!(g.sample(8, 0).histogram(), vec![3, 3, 2]);
    }

    #[test]
    fn epoch_shuffles_differ_but_repeat() {
        let g = Blobs::new(2, [1, 1, 1], 1.0, 1.0, 0).unwrap();
        let d = g.sample(50, 0);
        let e0 = d.epoch_batches(8, 3, 0, true);
        assert_eq!(e0, d.epoch_batches(8, 3, 0, true));
        assert_ne!(e0, d.epoch_batches(8, 3, 1, true));
        assert_eq!(e0.len(), 7);
        assert_eq!(e0.iter().map(Vec::len).sum::<usize>(), 50);
    }

    #[test]
    fn missing_dataset_names_the_path() {
        let spec = DataSpec::Cifar {
            dir: PathBuf::from("/nonexistent/cifar"),
            limit: None,
        };
        let err = load_dataset(&spec).unwrap_err().to_string();
        assert!(err.contains("/nonexistent/cifar/data_batch_1.bin"), "{err}");
    }
}
