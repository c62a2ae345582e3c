//! Datasets: CIFAR-10 binary batches, seeded splits, per-position mean
//! subtraction, crop/flip augmentation and a synthetic generator for
//! desk-scale runs.
//!
//! Images are stored as `f32` in `(batch, rows, cols, channels)` order and
//! scaled to `[0, 1]` on load.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::TensorShape;
use crate::nn::Tensor4;
use crate::rng::{seeded, Rng};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_CLASSES: usize = 10;
/// One label byte followed by three 32x32 channel planes.
pub const CIFAR_RECORD: usize = 1 + CIFAR_SIDE * CIFAR_SIDE * CIFAR_CHANNELS;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";
/// Zero padding on each side before random cropping.
pub const AUGMENT_PAD: usize = 4;

const SYNTHETIC_MAGIC: &[u8; 8] = b"CGPNASYN";
const SYNTHETIC_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: {len} bytes is not a whole number of {record}-byte records")]
    CorruptRecord { path: PathBuf, len: usize, record: usize },
    #[error("split of {train} + {val} samples is infeasible for a dataset of {available}")]
    SpecInfeasible { train: usize, val: usize, available: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("synthetic dataset file: {0}")]
    BadSynthetic(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Difficulty {
    /// Linearly separable by construction.
    Easy,
    /// Stronger noise and random translations; no separability guarantee.
    Hard,
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        })
    }
}

impl FromStr for Difficulty {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            other => Err(format!("unknown difficulty {other:?} (expected easy or hard)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples: usize,
    /// Images are `image_size x image_size x 3`.
    pub image_size: usize,
    pub difficulty: Difficulty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Cifar10,
    Synthetic { spec: SyntheticSpec, seed: u64 },
    /// Read from a synthetic export file.
    File(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor4<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> TensorShape {
        self.images.shape()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            provenance: self.provenance.clone(),
        }
    }

    /// Count of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Official training and test sets.
#[derive(Debug, Clone)]
pub struct Cifar10 {
    pub train: Dataset,
    pub test: Dataset,
}

/// Parses whole CIFAR-10 records. Pixels are channel-planar in the file and
/// become channel-last here.
pub fn parse_cifar_records(bytes: &[u8], path: &Path) -> Result<Dataset, DataError> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(DataError::CorruptRecord {
            path: path.to_path_buf(),
            len: bytes.len(),
            record: CIFAR_RECORD,
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for record in bytes.chunks_exact(CIFAR_RECORD) {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(DataError::CorruptRecord {
                path: path.to_path_buf(),
                len: bytes.len(),
                record: CIFAR_RECORD,
            });
        }
        labels.push(label);
        data.extend(planar_to_hwc(&record[1..], CIFAR_SIDE, CIFAR_SIDE, CIFAR_CHANNELS));
    }
    Ok(Dataset {
        images: Tensor4::from_vec(n, CIFAR_SIDE, CIFAR_SIDE, CIFAR_CHANNELS, data),
        labels,
        classes: CIFAR_CLASSES,
        provenance: Provenance::Cifar10,
    })
}

fn planar_to_hwc(planes: &[u8], rows: usize, cols: usize, channels: usize) -> impl Iterator<Item = f32> + '_ {
    let plane = rows * cols;
    (0..plane).flat_map(move |p| (0..channels).map(move |c| planes[c * plane + p] as f32 / 255.0))
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DataError::MissingFile(path.to_path_buf()),
        _ => DataError::Io(e),
    })
}

fn concat(parts: Vec<Dataset>) -> Dataset {
    let mut iter = parts.into_iter();
    let mut first = iter.next().expect("at least one batch file");
    for part in iter {
        first.images.data.extend(part.images.data);
        first.images.batch += part.images.batch;
        first.labels.extend(part.labels);
    }
    first
}

/// Loads the five training batches and the test batch from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<Cifar10, DataError> {
    let load = |name: &str| {
        let path = dir.join(name);
        parse_cifar_records(&read_file(&path)?, &path)
    };
    let train = CIFAR_TRAIN_FILES.iter().map(|f| load(f)).collect::<Result<Vec<_>, _>>()?;
    Ok(Cifar10 {
        train: concat(train),
        test: load(CIFAR_TEST_FILE)?,
    })
}

/// Named split presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// 45,000 train / 5,000 validation.
    Default,
    /// 4,500 train / 500 validation.
    Small,
    /// 2,000 train / 500 validation, on synthetic 16x16 data by default.
    Desk,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Default => "default",
            Scenario::Small => "small",
            Scenario::Desk => "desk",
        })
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "default" => Ok(Scenario::Default),
            "small" => Ok(Scenario::Small),
            "desk" => Ok(Scenario::Desk),
            other => Err(format!("unknown scenario {other:?} (expected default, small or desk)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_n: usize,
    pub val_n: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn preset(scenario: Scenario, seed: u64) -> Self {
        let (train_n, val_n) = match scenario {
            Scenario::Default => (45_000, 5_000),
            Scenario::Small => (4_500, 500),
            Scenario::Desk => (2_000, 500),
        };
        SplitSpec { train_n, val_n, seed }
    }
}

/// Seeded sampling without replacement into disjoint train and validation
/// subsets.
pub fn split(ds: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset), DataError> {
    let need = spec.train_n + spec.val_n;
    if need > ds.len() || spec.train_n == 0 || spec.val_n == 0 {
        return Err(DataError::SpecInfeasible {
            train: spec.train_n,
            val: spec.val_n,
            available: ds.len(),
        });
    }
    let picked = index::sample(&mut seeded(spec.seed), ds.len(), need).into_vec();
    let (train, val) = picked.split_at(spec.train_n);
    Ok((ds.subset(train), ds.subset(val)))
}

/// Subtracts the per-position training mean from `train` and every dataset
/// in `others`; returns the mean image.
pub fn mean_subtract(train: &mut Dataset, others: &mut [&mut Dataset]) -> Result<Vec<f32>, DataError> {
    let shape = train.shape();
    if let Some(other) = others.iter().find(|o| o.shape() != shape) {
        return Err(DataError::ShapeMismatch(format!(
            "training images are {shape}, other split is {}",
            other.shape()
        )));
    }
    let len = shape.elements();
    let mut acc = vec![0f64; len];
    for sample in train.images.data.chunks_exact(len) {
        for (a, &v) in acc.iter_mut().zip(sample) {
            *a += v as f64;
        }
    }
    let n = train.len().max(1) as f64;
    let mean: Vec<f32> = acc.iter().map(|a| (a / n) as f32).collect();
    for ds in std::iter::once(&mut *train).chain(others.iter_mut().map(|d| &mut **d)) {
        for sample in ds.images.data.chunks_exact_mut(len) {
            for (v, &m) in sample.iter_mut().zip(&mean) {
                *v -= m;
            }
        }
    }
    Ok(mean)
}

/// Crop at offset `(dr, dc)` from the image zero-padded by [`AUGMENT_PAD`]
/// on each side, then optionally mirror left-right. Offsets range over
/// `0..=2 * AUGMENT_PAD`; `(AUGMENT_PAD, AUGMENT_PAD)` without flip is the
/// identity.
pub fn augment_with(image: &[f32], shape: TensorShape, dr: usize, dc: usize, flip: bool, out: &mut [f32]) {
    let TensorShape { rows, cols, channels } = shape;
    for r in 0..rows {
        for c in 0..cols {
            let dst = (r * cols + if flip { cols - 1 - c } else { c }) * channels;
            let (sr, sc) = (r + dr, c + dc);
            let inside = (AUGMENT_PAD..rows + AUGMENT_PAD).contains(&sr) && (AUGMENT_PAD..cols + AUGMENT_PAD).contains(&sc);
            if inside {
                let src = ((sr - AUGMENT_PAD) * cols + sc - AUGMENT_PAD) * channels;
                out[dst..dst + channels].copy_from_slice(&image[src..src + channels]);
            } else {
                out[dst..dst + channels].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// Random crop and flip of one image.
pub fn augment(image: &[f32], shape: TensorShape, rng: &mut Rng) -> Vec<f32> {
    let mut out = vec![0.0; image.len()];
    let dr = rng.gen_range(0..=2 * AUGMENT_PAD);
    let dc = rng.gen_range(0..=2 * AUGMENT_PAD);
    let flip = rng.gen_bool(0.5);
    augment_with(image, shape, dr, dc, flip, &mut out);
    out
}

/// Independently augments every sample of a batch.
pub fn augment_batch(batch: &Tensor4<f32>, rng: &mut Rng) -> Tensor4<f32> {
    let shape = batch.shape();
    let mut out = batch.zeros_like();
    let len = shape.elements();
    for (src, dst) in batch.data.chunks_exact(len).zip(out.data.chunks_exact_mut(len)) {
        let dr = rng.gen_range(0..=2 * AUGMENT_PAD);
        let dc = rng.gen_range(0..=2 * AUGMENT_PAD);
        let flip = rng.gen_bool(0.5);
        augment_with(src, shape, dr, dc, flip, dst);
    }
    out
}

const SYNTHETIC_CHANNELS: usize = 3;
/// Distance between the two closest class templates, in units of the
/// per-pixel noise standard deviation.
const CLASS_SEPARATION: f64 = 3.0;
const EASY_NOISE: f64 = 0.3;
const HARD_NOISE: f64 = 0.35;
const HARD_BAR_CONTRAST: f64 = 0.15;
/// Templates depend only on the class count and image size, never on the
/// dataset seed, so separately generated splits share their classes.
const TEMPLATE_SEED: u64 = 0x7e47_5eed;

/// Per-class `+-1` pattern constant over 2x2 pixel blocks (per channel).
fn block_pattern(rng: &mut Rng, side: usize) -> Vec<f64> {
    let blocks = side.div_ceil(2);
    let signs: Vec<f64> = (0..blocks * blocks * SYNTHETIC_CHANNELS)
        .map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let mut out = Vec::with_capacity(side * side * SYNTHETIC_CHANNELS);
    for r in 0..side {
        for c in 0..side {
            let block = (r / 2) * blocks + c / 2;
            out.extend_from_slice(&signs[block * SYNTHETIC_CHANNELS..(block + 1) * SYNTHETIC_CHANNELS]);
        }
    }
    out
}

/// Bar through the image centre at angle `pi * class / classes`.
fn bar(class: usize, classes: usize, side: usize) -> Vec<f64> {
    let angle = std::f64::consts::PI * class as f64 / classes as f64;
    let (sin, cos) = angle.sin_cos();
    let centre = (side as f64 - 1.0) / 2.0;
    let width = side as f64 / 8.0;
    let mut out = Vec::with_capacity(side * side * SYNTHETIC_CHANNELS);
    for r in 0..side {
        for c in 0..side {
            let (y, x) = (r as f64 - centre, c as f64 - centre);
            let dist = (x * sin - y * cos).abs();
            let v = (-dist * dist / (2.0 * width * width)).exp();
            out.extend(std::iter::repeat_n(v, SYNTHETIC_CHANNELS));
        }
    }
    out
}

fn sq_dist<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x.into() - y.into()).powi(2)).sum()
}

/// Class templates on a mid-grey background: a block texture scaled so the
/// closest pair sits [`CLASS_SEPARATION`] noise deviations apart, plus an
/// oriented bar for hard data.
fn class_templates(classes: usize, side: usize, difficulty: Difficulty) -> Vec<Vec<f64>> {
    let mut rng = seeded(TEMPLATE_SEED);
    let patterns: Vec<Vec<f64>> = (0..classes).map(|_| block_pattern(&mut rng, side)).collect();
    let closest = (0..classes)
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .map(|(i, j)| sq_dist(&patterns[i], &patterns[j]).sqrt())
        .filter(|d| *d > 0.0)
        .fold(f64::INFINITY, f64::min);
    let (noise, contrast) = match difficulty {
        Difficulty::Easy => (EASY_NOISE, 0.0),
        Difficulty::Hard => (HARD_NOISE, HARD_BAR_CONTRAST),
    };
    let amp = if closest.is_finite() { CLASS_SEPARATION * noise / closest } else { 0.0 };
    patterns
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let b = bar(k, classes, side);
            p.iter().zip(&b).map(|(q, v)| 0.5 + amp * q + contrast * v).collect()
        })
        .collect()
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Class-balanced synthetic images, quantized to 8 bits like CIFAR-10.
///
/// Each class owns a fixed random texture over 2x2 pixel blocks. Easy
/// samples are template plus Gaussian noise, kept only when their own
/// template is the nearest one with a margin of a tenth of the squared
/// template gap; nearest-template assignment is a linear classifier, so the
/// kept set is linearly separable. Hard samples add an oriented bar per
/// class, stronger noise and a random shift of up to a quarter of the side.
pub fn synthetic_dataset(spec: SyntheticSpec, seed: u64) -> Dataset {
    let side = spec.image_size;
    let classes = spec.classes.max(1);
    let templates = class_templates(classes, side, spec.difficulty);
    let templates32: Vec<Vec<f32>> = templates.iter().map(|t| t.iter().map(|&v| v as f32).collect()).collect();
    let gaps: Vec<Vec<f64>> = templates
        .iter()
        .map(|a| templates.iter().map(|b| sq_dist(a, b)).collect())
        .collect();
    let (noise, max_shift) = match spec.difficulty {
        Difficulty::Easy => (EASY_NOISE, 0),
        Difficulty::Hard => (HARD_NOISE, side / 4),
    };
    let normal = Normal::new(0.0, noise).expect("positive noise");
    let mut rng = seeded(seed);
    let len = side * side * SYNTHETIC_CHANNELS;
    let mut data = Vec::with_capacity(spec.samples * len);
    let mut labels = Vec::with_capacity(spec.samples);
    let mut sample = vec![0f32; len];
    for i in 0..spec.samples {
        let class = i % classes;
        loop {
            let (sr, sc) = if max_shift > 0 {
                let s = max_shift as isize;
                (rng.gen_range(-s..=s), rng.gen_range(-s..=s))
            } else {
                (0, 0)
            };
            for r in 0..side {
                for c in 0..side {
                    let tr = (r as isize - sr).clamp(0, side as isize - 1) as usize;
                    let tc = (c as isize - sc).clamp(0, side as isize - 1) as usize;
                    for ch in 0..SYNTHETIC_CHANNELS {
                        let t = templates[class][(tr * side + tc) * SYNTHETIC_CHANNELS + ch];
                        let v = quantize(t + normal.sample(&mut rng));
                        sample[(r * side + c) * SYNTHETIC_CHANNELS + ch] = v as f32 / 255.0;
                    }
                }
            }
            if spec.difficulty == Difficulty::Hard {
                break;
            }
            // the squared-distance gap is linear in the sample
            let own = sq_dist(&sample, &templates32[class]);
            let separated = (0..classes)
                .all(|k| k == class || sq_dist(&sample, &templates32[k]) - own > 0.1 * gaps[class][k]);
            if separated {
                break;
            }
        }
        data.extend_from_slice(&sample);
        labels.push(class);
    }
    Dataset {
        images: Tensor4::from_vec(spec.samples, side, side, SYNTHETIC_CHANNELS, data),
        labels,
        classes,
        provenance: Provenance::Synthetic { spec, seed },
    }
}

/// Writes `ds` as a versioned binary: `CGPNASYN`, then little-endian u32
/// version, rows, cols, channels, classes and count, then CIFAR-style
/// records (label byte, channel planes). Pixels must be 8-bit quantized.
pub fn save_synthetic(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let s = ds.shape();
    let mut buf = Vec::with_capacity(32 + ds.len() * (1 + s.elements()));
    buf.extend_from_slice(SYNTHETIC_MAGIC);
    for v in [SYNTHETIC_VERSION as usize, s.rows, s.cols, s.channels, ds.classes, ds.len()] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let plane = s.rows * s.cols;
    for (i, &label) in ds.labels.iter().enumerate() {
        buf.push(label as u8);
        let img = ds.images.sample(i);
        for c in 0..s.channels {
            buf.extend((0..plane).map(|p| (img[p * s.channels + c] * 255.0).round().clamp(0.0, 255.0) as u8));
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_synthetic(path: &Path) -> Result<Dataset, DataError> {
    let bytes = read_file(path)?;
    let bad = |m: &str| DataError::BadSynthetic(format!("{}: {m}", path.display()));
    if bytes.len() < 32 || &bytes[..8] != SYNTHETIC_MAGIC {
        return Err(bad("not a synthetic dataset file"));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    if field(0) != SYNTHETIC_VERSION as usize {
        return Err(bad(&format!("unsupported version {}", field(0))));
    }
    let (rows, cols, channels, classes, count) = (field(1), field(2), field(3), field(4), field(5));
    let record = 1 + rows * cols * channels;
    let body = &bytes[32..];
    if body.len() != record * count {
        return Err(DataError::CorruptRecord {
            path: path.to_path_buf(),
            len: body.len(),
            record,
        });
    }
    let mut labels = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * (record - 1));
    for r in body.chunks_exact(record) {
        if r[0] as usize >= classes {
            return Err(bad(&format!("label {} out of range", r[0])));
        }
        labels.push(r[0] as usize);
        data.extend(planar_to_hwc(&r[1..], rows, cols, channels));
    }
    Ok(Dataset {
        images: Tensor4::from_vec(count, rows, cols, channels, data),
        labels,
        classes,
        provenance: Provenance::File(path.display().to_string()),
    })
}
