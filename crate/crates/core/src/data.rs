//! Datasets, the synthetic rotation task, and the tiny classifier.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{DiffTensor, Tape};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::transforms::{Dims, ImageBatch};

pub const CONTAINER_MAGIC: &[u8; 4] = b"FAUG";
const CIFAR_RECORD: usize = 3073;
const CIFAR_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    CifarBinary,
    SimpleContainer,
}

impl DatasetFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cifar-binary" => Ok(Self::CifarBinary),
            "simple-container" => Ok(Self::SimpleContainer),
            other => Err(Error::Config(format!(
                "unknown dataset format `{other}` (expected cifar-binary or simple-container)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: ImageBatch,
    pub labels: Vec<usize>,
    pub class_count: usize,
    /// Predefined train/validation boundary: images before it form the
    /// training half, the rest the validation half.
    pub split: Option<usize>,
}

impl LabeledDataset {
    pub fn new(images: ImageBatch, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.len != labels.len() {
            return Err(Error::Dataset(format!("{} images but {} labels", images.len, labels.len())));
        }
        if let Some(l) = labels.iter().find(|l| **l >= class_count) {
            return Err(Error::Dataset(format!("label {l} out of range for {class_count} classes")));
        }
        Ok(Self { images, labels, class_count, split: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> Dims {
        self.images.dims
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let mut images = ImageBatch::new(self.images.dims);
        images.data.reserve(idx.len() * self.images.dims.numel());
        for &i in idx {
            images.data.extend_from_slice(self.images.image(i));
        }
        images.len = idx.len();
        Self { images, labels: idx.iter().map(|&i| self.labels[i]).collect(), class_count: self.class_count, split: None }
    }
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn load_raw_dataset(path: &Path, format: DatasetFormat) -> Result<LabeledDataset> {
    let bytes = fs::read(path)?;
    match format {
        DatasetFormat::CifarBinary => parse_cifar(&bytes),
        DatasetFormat::SimpleContainer => parse_container(&bytes),
    }
}

fn parse_cifar(bytes: &[u8]) -> Result<LabeledDataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Dataset(format!(
            "truncated cifar-binary file: {} bytes is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let dims = Dims::new(3, 32, 32);
    let count = bytes.len() / CIFAR_RECORD;
    let mut images = ImageBatch::new(dims);
    images.data.reserve(count * dims.numel());
    let mut labels = Vec::with_capacity(count);
    for rec in bytes.chunks(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        images.data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    images.len = count;
    LabeledDataset::new(images, labels, CIFAR_CLASSES)
}

fn parse_container(bytes: &[u8]) -> Result<LabeledDataset> {
    if bytes.len() < 24 {
        return Err(Error::Dataset("truncated container header".into()));
    }
    if &bytes[..4] != CONTAINER_MAGIC {
        return Err(Error::Dataset("bad magic, expected FAUG".into()));
    }
    let count = read_u32(bytes, 4) as usize;
    let dims = Dims::new(read_u32(bytes, 8) as usize, read_u32(bytes, 12) as usize, read_u32(bytes, 16) as usize);
    let class_count = read_u32(bytes, 20) as usize;
    if dims.numel() == 0 || class_count == 0 {
        return Err(Error::Dataset("container has empty image dimensions or no classes".into()));
    }
    let record = 2 + dims.numel();
    let expected = 24 + count * record;
    if bytes.len() != expected {
        return Err(Error::Dataset(format!("truncated container: expected {expected} bytes, found {}", bytes.len())));
    }
    let mut images = ImageBatch::new(dims);
    images.data.reserve(count * dims.numel());
    let mut labels = Vec::with_capacity(count);
    for rec in bytes[24..].chunks(record) {
        labels.push(u16::from_le_bytes([rec[0], rec[1]]) as usize);
        images.data.extend(rec[2..].iter().map(|&b| b as f64 / 255.0));
    }
    images.len = count;
    LabeledDataset::new(images, labels, class_count)
}

/// Encode as a simple container; pixels are rounded to bytes.
pub fn encode_container(ds: &LabeledDataset) -> Result<Vec<u8>> {
    let d = ds.dims();
    let mut out = Vec::with_capacity(24 + ds.len() * (2 + d.numel()));
    out.extend_from_slice(CONTAINER_MAGIC);
    for v in [ds.len(), d.c, d.h, d.w, ds.class_count] {
        let v = u32::try_from(v).map_err(|_| Error::Dataset(format!("{v} does not fit the container header")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for i in 0..ds.len() {
        let l = u16::try_from(ds.labels[i]).map_err(|_| Error::Dataset("label does not fit in u16".into()))?;
        out.extend_from_slice(&l.to_le_bytes());
        out.extend(ds.images.image(i).iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

/// Class-balanced random halves, or the predefined split when the dataset has one.
pub fn split_half(ds: &LabeledDataset, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if ds.len() < 2 {
        return Err(Error::Config(format!("dataset of {} samples is too small to split", ds.len())));
    }
    if let Some(b) = ds.split {
        let train: Vec<usize> = (0..b).collect();
        let val: Vec<usize> = (b..ds.len()).collect();
        return Ok((ds.select(&train), ds.select(&val)));
    }
    let mut rng = stream(seed, "split", &[]);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    let mut carry = false;
    for c in 0..ds.class_count {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() == 1 {
            log::warn!("class {c} has a single sample; the split is unbalanced");
        }
        idx.shuffle(&mut rng);
        // Odd classes alternate which side receives the extra sample.
        let mut half = idx.len() / 2;
        if idx.len() % 2 == 1 {
            if carry {
                half += 1;
            }
            carry = !carry;
        }
        train.extend_from_slice(&idx[..half]);
        val.extend_from_slice(&idx[half..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((ds.select(&train), ds.select(&val)))
}

/// A class-balanced random subset of `n` samples (the whole set when `n >= len`).
pub fn subset(ds: &LabeledDataset, n: usize, seed: u64) -> LabeledDataset {
    if n >= ds.len() {
        return ds.clone();
    }
    let mut rng = stream(seed, "subset", &[]);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for (i, l) in ds.labels.iter().enumerate() {
        per_class[*l].push(i);
    }
    per_class.iter_mut().for_each(|v| v.shuffle(&mut rng));
    let mut picked = Vec::with_capacity(n);
    let mut round = 0;
    while picked.len() < n {
        for class in &per_class {
            if picked.len() < n && round < class.len() {
                picked.push(class[round]);
            }
        }
        round += 1;
    }
    picked.sort_unstable();
    ds.select(&picked)
}

// ---------------------------------------------------------------------------
// synthetic rotation task

pub const SYNTH_SIZE: usize = 32;
/// Training orientations: class 0 around `-TRAIN_CENTER`, class 1 around `+TRAIN_CENTER`.
pub const SYNTH_TRAIN_CENTER: f64 = 15.0;
pub const SYNTH_TRAIN_SPREAD: f64 = 5.0;
/// Validation orientations are uniform in `[-VAL_RANGE, VAL_RANGE]` for both classes.
pub const SYNTH_VAL_RANGE: f64 = 30.0;
/// Half-length of the central gap that marks class 1.
pub const SYNTH_GAP: f64 = 1.5;

/// Render one oriented bar: solid (class 0) or broken by a short gap at its
/// centre (class 1).
pub fn render_bars(class: usize, angle_deg: f64, rng: &mut impl Rng) -> Vec<f64> {
    let s = SYNTH_SIZE;
    let dims = Dims::new(3, s, s);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let c = (s as f64 - 1.0) / 2.0;
    let (jx, jy) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let half_len = 10.0 + rng.random_range(0.0..2.0);
    let half_w = 1.2;
    let gap = if class == 0 { 0.0 } else { SYNTH_GAP };
    let bright = rng.random_range(0.6..1.0);
    let tint: Vec<f64> = (0..3).map(|_| rng.random_range(0.8..1.0)).collect();
    let mut img = vec![0.0; dims.numel()];
    for y in 0..s {
        for x in 0..s {
            let (dx, dy) = (x as f64 - c - jx, y as f64 - c - jy);
            let along = (dx * cos + dy * sin).abs();
            let across = (-dx * sin + dy * cos).abs();
            let outer = (half_len - along + 0.5).clamp(0.0, 1.0);
            let inner = (along - gap + 0.5).clamp(0.0, 1.0);
            let v = outer * inner * (half_w - across + 0.5).clamp(0.0, 1.0);
            for ch in 0..3 {
                let noise = 0.1 * rng.random::<f64>();
                img[ch * s * s + y * s + x] = (bright * tint[ch] * v + noise).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Two-class oriented-bar images. The first half (training) shows each class
/// in a narrow orientation band on its own side of zero; the second half
/// (validation) draws orientations uniformly from a wide range, so the class
/// can only be told apart by the number of bars.
pub fn synth_rotation_task(n: usize, seed: u64) -> Result<LabeledDataset> {
    if n < 200 {
        return Err(Error::Config(format!("synthetic task needs at least 200 images, got {n}")));
    }
    let n = n - n % 4;
    let dims = Dims::new(3, SYNTH_SIZE, SYNTH_SIZE);
    let mut images = ImageBatch::new(dims);
    let mut labels = Vec::with_capacity(n);
    let half = n / 2;
    for i in 0..n {
        let mut rng = stream(seed, "synth-rotation", &[i as u64]);
        let class = i % 2;
        let angle = if i < half {
            let sign = if class == 0 { -1.0 } else { 1.0 };
            sign * SYNTH_TRAIN_CENTER + rng.random_range(-SYNTH_TRAIN_SPREAD..=SYNTH_TRAIN_SPREAD)
        } else {
            rng.random_range(-SYNTH_VAL_RANGE..=SYNTH_VAL_RANGE)
        };
        images.push(&render_bars(class, angle, &mut rng))?;
        labels.push(class);
    }
    let mut ds = LabeledDataset::new(images, labels, 2)?;
    ds.split = Some(half);
    Ok(ds)
}

// ---------------------------------------------------------------------------
// classifier

/// Smooth activation: with `relu`, the parameter gradient jumps whenever a
/// unit changes sign, and the finite-difference mixed derivatives in the
/// hypergradient measure those jumps instead of curvature.
fn activation(tape: &mut Tape, h: DiffTensor) -> Result<DiffTensor> {
    tape.silu(h)
}

/// Two stride-2 3x3 convolutions (8 and 16 channels) with SiLU and a linear head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierSpec {
    pub input: Dims,
    pub classes: usize,
}

const CONV1: usize = 8;
const CONV2: usize = 16;

fn conv_out(n: usize) -> usize {
    (n + 2 - 3) / 2 + 1
}

impl ClassifierSpec {
    pub fn new(input: Dims, classes: usize) -> Result<Self> {
        if classes < 2 || input.numel() == 0 {
            return Err(Error::Config(format!("classifier needs at least 2 classes, got {classes}")));
        }
        Ok(Self { input, classes })
    }

    fn features(&self) -> usize {
        CONV2 * conv_out(conv_out(self.input.h)) * conv_out(conv_out(self.input.w))
    }

    /// Parameter shapes in storage order: conv1 weight/bias, conv2 weight/bias, head weight/bias.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        vec![
            vec![CONV1, self.input.c, 3, 3],
            vec![CONV1],
            vec![CONV2, CONV1, 3, 3],
            vec![CONV2],
            vec![self.features(), self.classes],
            vec![1, self.classes],
        ]
    }

    pub fn num_params(&self) -> usize {
        self.shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// He-normal weights, zero biases.
    pub fn init(&self, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, "classifier-init", &[]);
        let mut theta = Vec::with_capacity(self.num_params());
        for shape in self.shapes() {
            let n: usize = shape.iter().product();
            if shape.len() == 1 || shape[0] == 1 {
                theta.extend(std::iter::repeat_n(0.0, n));
                continue;
            }
            let fan_in = if shape.len() == 4 { shape[1] * 9 } else { shape[0] };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            theta.extend((0..n).map(|_| normal.sample(&mut rng)));
        }
        theta
    }

    /// Record `theta` on the tape as leaves (`trainable`) or constants.
    pub fn record(&self, tape: &mut Tape, theta: &[f64], trainable: bool) -> Result<Vec<DiffTensor>> {
        if theta.len() != self.num_params() {
            return Err(Error::ShapeMismatch { op: "classifier", lhs: vec![self.num_params()], rhs: vec![theta.len()] });
        }
        let mut at = 0;
        self.shapes()
            .into_iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let v = theta[at..at + n].to_vec();
                at += n;
                if trainable {
                    tape.leaf(v, &shape)
                } else {
                    tape.constant(v, &shape)
                }
            })
            .collect()
    }

    /// Logits `[1, classes]` for one `[C, H, W]` image.
    pub fn forward(&self, tape: &mut Tape, params: &[DiffTensor], x: DiffTensor) -> Result<DiffTensor> {
        let h = tape.conv2d(x, params[0], params[1], 2, 1)?;
        let h = activation(tape, h)?;
        let h = tape.conv2d(h, params[2], params[3], 2, 1)?;
        let h = activation(tape, h)?;
        let h = tape.reshape(h, &[1, self.features()])?;
        let logits = tape.matmul(h, params[4])?;
        tape.add(logits, params[5])
    }

    /// Logits for one image without recording gradients.
    pub fn predict(&self, theta: &[f64], image: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let params = self.record(&mut tape, theta, false)?;
        let x = tape.constant(image.to_vec(), &self.input.shape())?;
        let y = self.forward(&mut tape, &params, x)?;
        Ok(tape.value(y).to_vec())
    }

    /// Fraction of `ds` classified correctly.
    pub fn accuracy(&self, theta: &[f64], ds: &LabeledDataset) -> Result<f64> {
        if ds.is_empty() {
            return Err(Error::Dataset("accuracy of an empty dataset".into()));
        }
        let mut correct = 0;
        for i in 0..ds.len() {
            let logits = self.predict(theta, ds.images.image(i))?;
            let best = logits
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (j, v)| if *v > b.1 { (j, *v) } else { b })
                .0;
            correct += usize::from(best == ds.labels[i]);
        }
        Ok(correct as f64 / ds.len() as f64)
    }
}

/// Softmax cross-entropy of `[1, C]` logits against `label`.
pub fn cross_entropy(tape: &mut Tape, logits: DiffTensor, label: usize) -> Result<DiffTensor> {
    let classes = *tape.shape(logits).last().unwrap_or(&0);
    if label >= classes {
        return Err(Error::Dataset(format!("class id {label} out of range for {classes} classes")));
    }
    let lsm = tape.log_softmax_rows(logits)?;
    let picked = tape.element(lsm, label)?;
    tape.neg(picked)
}
