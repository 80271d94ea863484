//! Stochastic relaxations used to sample a policy: Gumbel-Softmax over the
//! depth, Gumbel-Sinkhorn over transform-to-layer assignments, and the
//! reparameterized magnitude draws.
//!
//! Samplers take their noise explicitly so that the same draw can be replayed
//! on several tapes (finite-difference probes, per-image workers). The
//! `draw_*` helpers produce that noise from an RNG.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{DiffTensor, Tape};
use crate::error::{Error, Result};

/// Padding logit for the `N - K` columns that make the logit matrix square.
pub const PAD_VALUE: f64 = -1e3;
/// Floor applied after exponentiation so Sinkhorn inputs stay strictly positive.
pub const SINKHORN_FLOOR: f64 = 1e-30;
/// Uniform draws are kept inside `[EPS_CLAMP, 1 - EPS_CLAMP]`.
pub const EPS_CLAMP: f64 = 1e-12;
/// Gaussian magnitude draws are clamped into `[GAUSS_CLAMP, 1 - GAUSS_CLAMP]`.
pub const GAUSS_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(t: f64) -> Result<Self> {
        if t > 0.0 && t.is_finite() {
            Ok(Self(t))
        } else {
            Err(Error::Parameter(format!("temperature must be positive, got {t}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// i.i.d. standard Gumbel draws.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelSample {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(EPS_CLAMP, 1.0 - EPS_CLAMP);
    -(-u.ln()).ln()
}

pub fn sample_gumbel<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> GumbelSample {
    let n = shape.iter().product();
    let values = (0..n).map(|_| gumbel_from_uniform(rng.random::<f64>())).collect();
    GumbelSample { shape: shape.to_vec(), values }
}

pub fn draw_uniform<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>().clamp(EPS_CLAMP, 1.0 - EPS_CLAMP)).collect()
}

pub fn draw_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Standard logistic noise, the difference of two Gumbels.
pub fn draw_logistic<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u = rng.random::<f64>().clamp(EPS_CLAMP, 1.0 - EPS_CLAMP);
            (u / (1.0 - u)).ln()
        })
        .collect()
}

fn argmax(v: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in v.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// A hardened categorical draw: `hard` carries the one-hot forward value and
/// routes its gradient to `soft`.
#[derive(Debug, Clone, Copy)]
pub struct CategoricalDraw {
    pub soft: DiffTensor,
    pub hard: DiffTensor,
    pub index: usize,
}

/// `softmax((delta + g) / t)` hardened to a one-hot with a straight-through gradient.
pub fn gumbel_softmax_hard(tape: &mut Tape, delta: DiffTensor, t: Temperature, gumbel: &[f64]) -> Result<CategoricalDraw> {
    let n = tape.value(delta).len();
    if gumbel.len() != n {
        return Err(Error::ShapeMismatch { op: "gumbel_softmax", lhs: vec![n], rhs: vec![gumbel.len()] });
    }
    let shape = tape.shape(delta).to_vec();
    let g = tape.constant(gumbel.to_vec(), &shape)?;
    let noisy = tape.add(delta, g)?;
    let scaled = tape.scale(noisy, 1.0 / t.get())?;
    let soft = tape.softmax_rows(scaled)?;
    let index = argmax(tape.value(soft).iter().copied());
    let mut onehot = vec![0.0; n];
    onehot[index] = 1.0;
    let hard_value = tape.constant(onehot, &shape)?;
    let hard = tape.straight_through(hard_value, soft)?;
    Ok(CategoricalDraw { soft, hard, index })
}

/// Append `N - K` columns of `pad_value` to an `N x K` logit matrix.
pub fn pad_logits(tape: &mut Tape, pi: DiffTensor, pad_value: f64) -> Result<DiffTensor> {
    let shape = tape.shape(pi).to_vec();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch { op: "pad_logits", lhs: shape, rhs: vec![] });
    }
    let (n, k) = (shape[0], shape[1]);
    if k > n {
        return Err(Error::Config(format!("max depth K={k} exceeds the number of transforms N={n}")));
    }
    if k == n {
        return Ok(pi);
    }
    let pad = tape.constant(vec![pad_value; n * (n - k)], &[n, n - k])?;
    tape.concat(&[pi, pad], 1)
}

/// `iters` alternations of row normalization followed by column normalization.
pub fn sinkhorn_normalize(tape: &mut Tape, m: DiffTensor, iters: usize) -> Result<DiffTensor> {
    let shape = tape.shape(m).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::ShapeMismatch { op: "sinkhorn", lhs: shape, rhs: vec![] });
    }
    if let Some(bad) = tape.value(m).iter().find(|v| **v <= 0.0) {
        return Err(Error::Domain(format!("sinkhorn input must be strictly positive, found {bad}")));
    }
    let mut x = m;
    for _ in 0..iters {
        let rows = tape.sum_axis(x, 1)?;
        let rows = tape.broadcast_to(rows, &shape)?;
        x = tape.div(x, rows)?;
        let cols = tape.sum_axis(x, 0)?;
        let cols = tape.broadcast_to(cols, &shape)?;
        x = tape.div(x, cols)?;
    }
    Ok(x)
}

/// A hardened near-permutation: `rows[k]` is the transform selected at layer `k`.
#[derive(Debug, Clone)]
pub struct PermutationDraw {
    pub soft: DiffTensor,
    pub hard: DiffTensor,
    pub rows: Vec<usize>,
}

/// Exponentiated, floored `(pad(pi) + G) / t`, the Sinkhorn input.
fn perturbed_kernel(tape: &mut Tape, pi: DiffTensor, t: Temperature, gumbel: &[f64]) -> Result<DiffTensor> {
    let padded = pad_logits(tape, pi, PAD_VALUE)?;
    let n = tape.shape(padded)[0];
    if gumbel.len() != n * n {
        return Err(Error::ShapeMismatch { op: "gumbel_sinkhorn", lhs: vec![n, n], rhs: vec![gumbel.len()] });
    }
    let g = tape.constant(gumbel.to_vec(), &[n, n])?;
    let noisy = tape.add(padded, g)?;
    let scaled = tape.scale(noisy, 1.0 / t.get())?;
    let e = tape.exp(scaled)?;
    tape.clamp(e, SINKHORN_FLOOR, f64::MAX)
}

/// Gumbel-Sinkhorn sample truncated to the first `K` columns, hardened per
/// column by argmax with a straight-through gradient.
pub fn gumbel_sinkhorn_sample(
    tape: &mut Tape,
    pi: DiffTensor,
    t: Temperature,
    iters: usize,
    gumbel: &[f64],
) -> Result<PermutationDraw> {
    if iters == 0 {
        return Err(Error::Parameter("gumbel-sinkhorn needs at least one iteration".into()));
    }
    let (n, k) = {
        let s = tape.shape(pi);
        (s[0], s[1])
    };
    let kernel = perturbed_kernel(tape, pi, t, gumbel)?;
    let full = sinkhorn_normalize(tape, kernel, iters)?;
    let soft = tape.slice(full, 1, 0, k)?;
    let (rows, onehot) = column_argmax(tape.value(soft), n, k);
    let hard_value = tape.constant(onehot, &[n, k])?;
    let hard = tape.straight_through(hard_value, soft)?;
    Ok(PermutationDraw { soft, hard, rows })
}

/// Independent Gumbel-Softmax per layer (column) over an `N x K` logit matrix.
/// Repeats across layers are possible; used as the repetition baseline.
pub fn independent_columns_sample(
    tape: &mut Tape,
    pi: DiffTensor,
    t: Temperature,
    gumbel: &[f64],
) -> Result<PermutationDraw> {
    let (n, k) = {
        let s = tape.shape(pi);
        (s[0], s[1])
    };
    if gumbel.len() != n * k {
        return Err(Error::ShapeMismatch { op: "independent_columns", lhs: vec![n, k], rhs: vec![gumbel.len()] });
    }
    let g = tape.constant(gumbel.to_vec(), &[n, k])?;
    let noisy = tape.add(pi, g)?;
    let scaled = tape.scale(noisy, 1.0 / t.get())?;
    let mut cols = Vec::with_capacity(k);
    for c in 0..k {
        let col = tape.slice(scaled, 1, c, 1)?;
        let col = tape.reshape(col, &[n])?;
        let col = tape.softmax_rows(col)?;
        cols.push(tape.reshape(col, &[n, 1])?);
    }
    let soft = tape.concat(&cols, 1)?;
    let (rows, onehot) = column_argmax(tape.value(soft), n, k);
    let hard_value = tape.constant(onehot, &[n, k])?;
    let hard = tape.straight_through(hard_value, soft)?;
    Ok(PermutationDraw { soft, hard, rows })
}

fn column_argmax(v: &[f64], n: usize, k: usize) -> (Vec<usize>, Vec<f64>) {
    let mut onehot = vec![0.0; n * k];
    let rows: Vec<usize> = (0..k)
        .map(|c| {
            let r = argmax((0..n).map(|i| v[i * k + c]));
            onehot[r * k + c] = 1.0;
            r
        })
        .collect();
    (rows, onehot)
}

/// `M = (sigmoid(high) - sigmoid(low)) * eps + sigmoid(low)`, elementwise.
pub fn sample_magnitude(tape: &mut Tape, low: DiffTensor, high: DiffTensor, eps: &[f64]) -> Result<DiffTensor> {
    let shape = tape.shape(low).to_vec();
    if eps.len() != tape.value(low).len() {
        return Err(Error::ShapeMismatch { op: "sample_magnitude", lhs: shape, rhs: vec![eps.len()] });
    }
    let sl = tape.sigmoid(low)?;
    let sh = tape.sigmoid(high)?;
    let width = tape.sub(sh, sl)?;
    let e = tape.constant(eps.to_vec(), &shape)?;
    let scaled = tape.mul(width, e)?;
    tape.add(scaled, sl)
}

/// `M = std * n + mean` with standard normal `n`, clamped into the open unit interval.
pub fn sample_magnitude_gaussian(tape: &mut Tape, mean: DiffTensor, std: DiffTensor, normal: &[f64]) -> Result<DiffTensor> {
    let shape = tape.shape(mean).to_vec();
    if let Some(bad) = tape.value(std).iter().find(|s| **s <= 0.0) {
        return Err(Error::Parameter(format!("gaussian magnitude std must be positive, got {bad}")));
    }
    if normal.len() != tape.value(mean).len() {
        return Err(Error::ShapeMismatch { op: "sample_magnitude_gaussian", lhs: shape, rhs: vec![normal.len()] });
    }
    let z = tape.constant(normal.to_vec(), &shape)?;
    let spread = tape.mul(std, z)?;
    let m = tape.add(spread, mean)?;
    tape.clamp(m, GAUSS_CLAMP, 1.0 - GAUSS_CLAMP)
}

/// Binary concrete gate `sigmoid((a + logistic) / t)` hardened at 0.5.
pub fn gumbel_sigmoid_hard(tape: &mut Tape, logits: DiffTensor, t: Temperature, logistic: &[f64]) -> Result<(DiffTensor, DiffTensor)> {
    let shape = tape.shape(logits).to_vec();
    let noise = tape.constant(logistic.to_vec(), &shape)?;
    let noisy = tape.add(logits, noise)?;
    let scaled = tape.scale(noisy, 1.0 / t.get())?;
    let soft = tape.sigmoid(scaled)?;
    let hard_value: Vec<f64> = tape.value(soft).iter().map(|&p| if p > 0.5 { 1.0 } else { 0.0 }).collect();
    let hard_value = tape.constant(hard_value, &shape)?;
    let hard = tape.straight_through(hard_value, soft)?;
    Ok((soft, hard))
}

/// Whether any transform is selected at more than one layer.
pub fn has_repeat(rows: &[usize]) -> bool {
    rows.iter().enumerate().any(|(i, r)| rows[..i].contains(r))
}

/// How the transform-to-layer assignment is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignmentSampler {
    /// Gumbel-Sinkhorn over the padded square matrix.
    Sinkhorn,
    /// An independent Gumbel-Softmax per layer.
    Independent,
}

impl AssignmentSampler {
    pub fn name(self) -> &'static str {
        match self {
            AssignmentSampler::Sinkhorn => "sinkhorn",
            AssignmentSampler::Independent => "independent",
        }
    }
}

/// Monte-Carlo estimate of the probability that a hardened draw repeats a
/// transform across layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepetitionStats {
    pub rate: f64,
    /// Standard deviation of the per-draw repeat indicator.
    pub std: f64,
    /// Fraction of draws whose hardened assignment has a one-hot column
    /// (always 1 by construction; kept as a check).
    pub one_hot_columns: f64,
    pub samples: usize,
}

/// Repeat rate of `samples` hardened draws from the `N x K` logits `pi`.
/// Draw `s` uses the noise stream `(seed, "repetition", [s])`.
#[allow(clippy::too_many_arguments)]
pub fn repetition_rate(
    pi: &[f64],
    n: usize,
    k: usize,
    t: Temperature,
    iters: usize,
    sampler: AssignmentSampler,
    samples: usize,
    seed: u64,
) -> Result<RepetitionStats> {
    if samples == 0 || pi.len() != n * k || k > n {
        return Err(Error::Parameter(format!("repetition rate needs samples > 0 and an N x K logit matrix, K <= N (got {n} x {k}, {} values)", pi.len())));
    }
    let mut repeats = 0usize;
    let mut one_hot = 0usize;
    for s in 0..samples {
        let mut rng = crate::rng::stream(seed, "repetition", &[s as u64]);
        let mut tape = Tape::new();
        let logits = tape.constant(pi.to_vec(), &[n, k])?;
        let draw = match sampler {
            AssignmentSampler::Sinkhorn => {
                let g: Vec<f64> = (0..n * n).map(|_| gumbel_from_uniform(rng.random())).collect();
                gumbel_sinkhorn_sample(&mut tape, logits, t, iters, &g)?
            }
            AssignmentSampler::Independent => {
                let g: Vec<f64> = (0..n * k).map(|_| gumbel_from_uniform(rng.random())).collect();
                independent_columns_sample(&mut tape, logits, t, &g)?
            }
        };
        let hard = tape.value(draw.hard);
        let columns_ok = (0..k).all(|c| {
            let col: Vec<f64> = (0..n).map(|r| hard[r * k + c]).collect();
            col.iter().filter(|&&v| v == 1.0).count() == 1 && col.iter().all(|&v| v == 0.0 || v == 1.0)
        });
        one_hot += columns_ok as usize;
        repeats += has_repeat(&draw.rows) as usize;
    }
    let m = samples as f64;
    let rate = repeats as f64 / m;
    Ok(RepetitionStats { rate, std: (rate * (1.0 - rate)).sqrt(), one_hot_columns: one_hot as f64 / m, samples })
}

/// Plain softmax of a logit vector.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}
