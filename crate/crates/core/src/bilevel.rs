//! Alternating one-step bilevel optimization of classifier weights `theta`
//! and policy parameters `phi`.
//!
//! Each step takes an SGD step on `theta` with the augmented training loss
//! and an Adam step on `phi` with the hypergradient
//!
//! ```text
//! dphi = -eta * [grad_phi L_train(theta + e v) - grad_phi L_train(theta - e v)] / (2 e)
//! v    = grad_theta L_val(theta - eta * grad_theta L_train(theta)),   e = scale / |v|
//! ```
//!
//! which is a central-difference approximation of the mixed second
//! derivative term of the one-step unrolled validation loss.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::autodiff::Tape;
use crate::data::{cross_entropy, ClassifierSpec, LabeledDataset};
use crate::error::{Error, Result};
use crate::policy::{
    anneal_temperature, apply_hard, apply_policy, batch_noise, sample_hard, sample_policy, warmup_gate, ApplyMode,
    DepthMode, EvalSettings, GroupSet, HardPolicy, MagnitudeDist, ParamGroup, PhiTensors, PolicyNoise, PolicyParams,
    SamplingMode, ScheduleConfig, MIN_GAUSS_STD,
};
use crate::relaxations::Temperature;
use crate::rng::stream;
use crate::transforms;

// ---------------------------------------------------------------------------
// optimizers

/// SGD with optional (Nesterov) momentum and L2 weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    buf: Option<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, nesterov: bool, weight_decay: f64) -> Self {
        Self { momentum, nesterov, weight_decay, buf: None }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        let g: Vec<f64> = grad.iter().zip(params.iter()).map(|(g, p)| g + self.weight_decay * p).collect();
        let dir = if self.momentum == 0.0 {
            g
        } else {
            let buf = match self.buf.take() {
                None => g.clone(),
                Some(mut b) => {
                    b.iter_mut().zip(&g).for_each(|(b, g)| *b = self.momentum * *b + g);
                    b
                }
            };
            let dir = if self.nesterov { g.iter().zip(&buf).map(|(g, b)| g + self.momentum * b).collect() } else { buf.clone() };
            self.buf = Some(buf);
            dir
        };
        params.iter_mut().zip(&dir).for_each(|(p, d)| *p -= lr * d);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// `lr * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr;
    }
    0.5 * lr * (1.0 + (PI * step as f64 / total as f64).cos())
}

// ---------------------------------------------------------------------------
// hypergradient

/// Where the validation gradient `v` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HypergradPoint {
    /// At the virtual step `theta - eta * grad L_train`.
    #[default]
    Exact,
    /// At the current `theta`.
    Current,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FdMode {
    #[default]
    Central,
    OneSided,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HypergradConfig {
    pub mode: FdMode,
    pub point: HypergradPoint,
    pub fd_epsilon_scale: f64,
}

impl Default for HypergradConfig {
    fn default() -> Self {
        Self { mode: FdMode::Central, point: HypergradPoint::Exact, fd_epsilon_scale: 0.01 }
    }
}

/// The three gradient oracles a hypergradient step needs. Implementations
/// hold `phi`, the batches and the augmentation noise fixed.
pub trait BilevelProblem {
    /// Training loss and its gradient in `theta`.
    fn train_theta_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;
    /// Validation loss and its gradient in `theta`.
    fn val_theta_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;
    /// Gradient of the training loss in (flattened) `phi`.
    fn train_phi_grad(&self, theta: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypergrad {
    /// Approximate gradient of the unrolled validation loss in `phi`; `None` when skipped.
    pub delta_phi: Option<Vec<f64>>,
    pub train_loss: f64,
    pub val_loss: f64,
    /// `grad_theta L_train(theta)`, reusable for the inner step.
    pub grad_theta: Vec<f64>,
    pub v_norm: f64,
    pub epsilon: f64,
}

pub fn hypergradient<P: BilevelProblem + ?Sized>(
    problem: &P,
    theta: &[f64],
    eta: f64,
    cfg: &HypergradConfig,
) -> Result<Hypergrad> {
    if cfg.fd_epsilon_scale.is_nan() || cfg.fd_epsilon_scale <= 0.0 {
        return Err(Error::Config(format!("fd epsilon scale must be positive, got {}", cfg.fd_epsilon_scale)));
    }
    let (train_loss, grad_theta) = problem.train_theta_grad(theta)?;
    let point: Vec<f64> = match cfg.point {
        HypergradPoint::Exact => theta.iter().zip(&grad_theta).map(|(t, g)| t - eta * g).collect(),
        HypergradPoint::Current => theta.to_vec(),
    };
    let (val_loss, v) = problem.val_theta_grad(&point)?;
    let v_norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if v_norm == 0.0 || !v_norm.is_finite() {
        log::info!("validation gradient norm is {v_norm}; skipping the policy step");
        return Ok(Hypergrad { delta_phi: None, train_loss, val_loss, grad_theta, v_norm, epsilon: 0.0 });
    }
    let epsilon = cfg.fd_epsilon_scale / v_norm;
    let shifted = |sign: f64| -> Vec<f64> { theta.iter().zip(&v).map(|(t, v)| t + sign * epsilon * v).collect() };
    let plus = problem.train_phi_grad(&shifted(1.0))?;
    let (other, denom) = match cfg.mode {
        FdMode::Central => (problem.train_phi_grad(&shifted(-1.0))?, 2.0 * epsilon),
        FdMode::OneSided => (problem.train_phi_grad(theta)?, epsilon),
    };
    let delta_phi = plus.iter().zip(&other).map(|(p, m)| -eta * (p - m) / denom).collect();
    Ok(Hypergrad { delta_phi: Some(delta_phi), train_loss, val_loss, grad_theta, v_norm, epsilon })
}

// ---------------------------------------------------------------------------
// flattened policy parameters

/// Order and extent of each policy tensor in the flattened gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiLayout {
    pub segments: Vec<(PhiPart, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhiPart {
    Delta,
    Pi,
    MuLow,
    MuHigh,
    GaussMean,
    GaussStd,
    Gates,
}

impl PhiPart {
    pub fn group(self) -> ParamGroup {
        match self {
            PhiPart::Delta | PhiPart::Gates => ParamGroup::Depth,
            PhiPart::Pi => ParamGroup::Types,
            _ => ParamGroup::Magnitude,
        }
    }
}

impl PhiLayout {
    pub fn of(params: &PolicyParams) -> Self {
        let nk = params.num_types * params.max_depth;
        let mut segments = vec![(PhiPart::Delta, params.delta.len()), (PhiPart::Pi, nk)];
        if params.gaussian.is_some() {
            segments.extend([(PhiPart::GaussMean, nk), (PhiPart::GaussStd, nk)]);
        } else {
            segments.extend([(PhiPart::MuLow, nk), (PhiPart::MuHigh, nk)]);
        }
        if let Some(g) = &params.gates {
            segments.push((PhiPart::Gates, g.len()));
        }
        Self { segments }
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.1).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_mut<'a>(&self, params: &'a mut PolicyParams, part: PhiPart) -> &'a mut Vec<f64> {
        match part {
            PhiPart::Delta => &mut params.delta,
            PhiPart::Pi => &mut params.pi,
            PhiPart::MuLow => &mut params.mu_low,
            PhiPart::MuHigh => &mut params.mu_high,
            PhiPart::GaussMean => &mut params.gaussian.as_mut().expect("gaussian layout").mean,
            PhiPart::GaussStd => &mut params.gaussian.as_mut().expect("gaussian layout").std,
            PhiPart::Gates => params.gates.as_mut().expect("gate layout"),
        }
    }
}

fn flat_phi_grad(tape_grads: &crate::autodiff::Gradients, phi: &PhiTensors, layout: &PhiLayout) -> Vec<f64> {
    let mut out = Vec::with_capacity(layout.len());
    for (part, len) in &layout.segments {
        let t = match part {
            PhiPart::Delta => Some(phi.delta),
            PhiPart::Pi => Some(phi.pi),
            PhiPart::MuLow => Some(phi.mu_low),
            PhiPart::MuHigh => Some(phi.mu_high),
            PhiPart::GaussMean => phi.gauss_mean,
            PhiPart::GaussStd => phi.gauss_std,
            PhiPart::Gates => phi.gates,
        };
        match t {
            Some(t) => out.extend(tape_grads.get_or_zeros(t, *len)),
            None => out.extend(std::iter::repeat_n(0.0, *len)),
        }
    }
    out
}

/// Adam states for each policy tensor, stepped per group.
#[derive(Debug, Clone)]
pub struct PhiOptimizer {
    layout: PhiLayout,
    states: Vec<Adam>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiLearningRates {
    pub mu: f64,
    pub pi: f64,
    pub delta: f64,
}

impl Default for PhiLearningRates {
    fn default() -> Self {
        Self { mu: 0.02, pi: 0.01, delta: 1.0 }
    }
}

impl PhiOptimizer {
    pub fn new(params: &PolicyParams, lr: PhiLearningRates) -> Self {
        let layout = PhiLayout::of(params);
        let states = layout
            .segments
            .iter()
            .map(|(part, len)| {
                let rate = match part.group() {
                    ParamGroup::Magnitude => lr.mu,
                    ParamGroup::Types => lr.pi,
                    ParamGroup::Depth => lr.delta,
                };
                Adam::new(rate, *len)
            })
            .collect();
        Self { layout, states }
    }

    /// Apply `grad` (flattened) to the groups in `active`.
    pub fn step(&mut self, params: &mut PolicyParams, grad: &[f64], active: GroupSet) {
        let mut at = 0;
        for ((part, len), state) in self.layout.segments.iter().zip(self.states.iter_mut()) {
            if active.contains(part.group()) {
                state.step(self.layout.slice_mut(params, *part), &grad[at..at + len]);
            }
            at += len;
        }
        if let Some(g) = params.gaussian.as_mut() {
            g.std.iter_mut().for_each(|s| *s = s.max(MIN_GAUSS_STD));
        }
    }
}

// ---------------------------------------------------------------------------
// losses over batches

/// A batch of image indices into a dataset, plus one policy noise per image.
pub struct AugmentedBatch<'a> {
    pub data: &'a LabeledDataset,
    pub indices: &'a [usize],
    pub noise: &'a [PolicyNoise],
}

/// Everything needed to evaluate policy-augmented losses on a batch.
pub struct SearchProblem<'a> {
    pub spec: ClassifierSpec,
    pub params: &'a PolicyParams,
    pub layout: PhiLayout,
    pub active: GroupSet,
    pub t: Temperature,
    pub iters: usize,
    pub train: AugmentedBatch<'a>,
    pub val: &'a LabeledDataset,
    pub val_indices: &'a [usize],
    pub pool: &'a ThreadPool,
}

fn sum_in_order(parts: Vec<(f64, Vec<f64>)>, len: usize) -> (f64, Vec<f64>) {
    let n = parts.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; len];
    for (l, g) in parts {
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

/// Mean cross-entropy and its `theta` gradient over `images`, computed per image in parallel.
pub fn theta_grad_batch(
    pool: &ThreadPool,
    spec: &ClassifierSpec,
    theta: &[f64],
    images: &[(Vec<f64>, usize)],
) -> Result<(f64, Vec<f64>)> {
    let parts = pool.install(|| {
        images
            .par_iter()
            .map(|(img, label)| {
                let mut tape = Tape::new();
                let params = spec.record(&mut tape, theta, true)?;
                let x = tape.constant(img.clone(), &spec.input.shape())?;
                let logits = spec.forward(&mut tape, &params, x)?;
                let loss = cross_entropy(&mut tape, logits, *label)?;
                let value = tape.scalar(loss);
                let g = tape.backward(loss)?;
                let mut flat = Vec::with_capacity(theta.len());
                for p in &params {
                    flat.extend(g.get_or_zeros(*p, tape.value(*p).len()));
                }
                Ok((value, flat))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(sum_in_order(parts, theta.len()))
}

/// Per-image loss and flattened `phi` gradient with the classifier held fixed.
#[allow(clippy::too_many_arguments)]
pub fn phi_grad_image(
    spec: &ClassifierSpec,
    theta: &[f64],
    params: &PolicyParams,
    layout: &PhiLayout,
    active: GroupSet,
    t: Temperature,
    iters: usize,
    image: &[f64],
    label: usize,
    noise: &PolicyNoise,
    mode: ApplyMode,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let phi = PhiTensors::record(&mut tape, params, active)?;
    let s = sample_policy(&mut tape, &phi, t, iters, noise)?;
    let x = tape.constant(image.to_vec(), &spec.input.shape())?;
    let y = apply_policy(&mut tape, x, &s, mode)?;
    let th = spec.record(&mut tape, theta, false)?;
    let logits = spec.forward(&mut tape, &th, y)?;
    let loss = cross_entropy(&mut tape, logits, label)?;
    let value = tape.scalar(loss);
    let g = tape.backward(loss)?;
    Ok((value, flat_phi_grad(&g, &phi, layout)))
}

impl SearchProblem<'_> {
    fn augmented_train(&self) -> Result<Vec<(Vec<f64>, usize)>> {
        let b = &self.train;
        self.pool.install(|| {
            b.indices
                .par_iter()
                .zip(b.noise.par_iter())
                .map(|(&i, z)| {
                    let policy = sample_hard(self.params, self.t, self.iters, z)?;
                    Ok((apply_hard(b.data.images.image(i), b.data.dims(), &policy)?, b.data.labels[i]))
                })
                .collect()
        })
    }

    fn mode(&self) -> ApplyMode {
        if self.active.types {
            ApplyMode::Full
        } else {
            ApplyMode::Selected
        }
    }
}

impl BilevelProblem for SearchProblem<'_> {
    fn train_theta_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        theta_grad_batch(self.pool, &self.spec, theta, &self.augmented_train()?)
    }

    fn val_theta_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let images: Vec<(Vec<f64>, usize)> =
            self.val_indices.iter().map(|&i| (self.val.images.image(i).to_vec(), self.val.labels[i])).collect();
        theta_grad_batch(self.pool, &self.spec, theta, &images)
    }

    fn train_phi_grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let b = &self.train;
        let mode = self.mode();
        let parts = self.pool.install(|| {
            b.indices
                .par_iter()
                .zip(b.noise.par_iter())
                .map(|(&i, z)| {
                    phi_grad_image(
                        &self.spec,
                        theta,
                        self.params,
                        &self.layout,
                        self.active,
                        self.t,
                        self.iters,
                        b.data.images.image(i),
                        b.data.labels[i],
                        z,
                        mode,
                    )
                })
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(sum_in_order(parts, self.layout.len()).1)
    }
}

// ---------------------------------------------------------------------------
// search loop

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_depth: usize,
    pub schedule: ScheduleConfig,
    pub lr_theta: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub phi_lr: PhiLearningRates,
    pub eta: f64,
    pub hypergrad: HypergradConfig,
    pub freeze: Vec<ParamGroup>,
    pub magnitude_dist: MagnitudeDist,
    pub depth_mode: DepthMode,
    pub sampling: SamplingMode,
    /// Depth pinned to this value (all other depths get negligible mass) when set.
    pub fixed_depth: Option<usize>,
    pub workers: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            max_depth: crate::policy::DEFAULT_MAX_DEPTH,
            schedule: ScheduleConfig::default(),
            lr_theta: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            phi_lr: PhiLearningRates::default(),
            eta: 0.1,
            hypergrad: HypergradConfig::default(),
            freeze: Vec::new(),
            magnitude_dist: MagnitudeDist::Uniform,
            depth_mode: DepthMode::Categorical,
            sampling: SamplingMode::PerImage,
            fixed_depth: None,
            workers: 1,
            seed: 0,
        }
    }
}

/// Logit given to a pinned depth; the rest get its negation.
pub const PINNED_LOGIT: f64 = 30.0;

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let positive = [
            ("epochs", self.epochs as f64),
            ("batch size", self.batch_size as f64),
            ("workers", self.workers as f64),
            ("classifier learning rate", self.lr_theta),
            ("eta", self.eta),
            ("mu learning rate", self.phi_lr.mu),
            ("pi learning rate", self.phi_lr.pi),
            ("delta learning rate", self.phi_lr.delta),
            ("fd epsilon scale", self.hypergrad.fd_epsilon_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1) and weight decay non-negative".into()));
        }
        if let Some(d) = self.fixed_depth {
            if d > self.max_depth || self.depth_mode == DepthMode::Bernoulli {
                return Err(Error::Config(format!("fixed depth {d} needs categorical depth and d <= {}", self.max_depth)));
            }
        }
        Ok(())
    }

    /// Initial policy parameters, honoring a pinned depth.
    pub fn initial_policy(&self) -> Result<PolicyParams> {
        let mut p = PolicyParams::init(self.max_depth, self.magnitude_dist, self.depth_mode)?;
        if let Some(d) = self.fixed_depth {
            p.delta.iter_mut().enumerate().for_each(|(k, v)| *v = if k == d { PINNED_LOGIT } else { -PINNED_LOGIT });
        }
        Ok(p)
    }

    fn frozen(&self) -> GroupSet {
        let mut f = GroupSet::default();
        for g in &self.freeze {
            match g {
                ParamGroup::Magnitude => f.magnitude = true,
                ParamGroup::Types => f.types = true,
                ParamGroup::Depth => f.depth = true,
            }
        }
        if self.fixed_depth.is_some() {
            f.depth = true;
        }
        f
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub t: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub depth_probs: Vec<f64>,
    pub layer_entropy: Vec<f64>,
    pub mean_sigma_low: f64,
    pub mean_sigma_high: f64,
}

impl EpochMetrics {
    fn snapshot(epoch: usize, t: f64, train_loss: f64, val_loss: f64, params: &PolicyParams, iters: usize) -> Self {
        let entropy = params
            .layer_marginals(iters)
            .iter()
            .map(|col| {
                let z: f64 = col.iter().sum();
                -col.iter().map(|p| p / z).filter(|p| *p > 0.0).map(|p| p * p.ln()).sum::<f64>()
            })
            .collect();
        let iv = params.magnitude_intervals();
        let n = iv.len() as f64;
        Self {
            epoch,
            t,
            train_loss,
            val_loss,
            depth_probs: params.depth_probs(),
            layer_entropy: entropy,
            mean_sigma_low: iv.iter().map(|i| i.0).sum::<f64>() / n,
            mean_sigma_high: iv.iter().map(|i| i.1).sum::<f64>() / n,
        }
    }
}

pub fn metrics_header(max_depth: usize) -> String {
    let mut cols: Vec<String> = ["epoch", "t", "train_loss", "val_loss"].iter().map(|s| s.to_string()).collect();
    cols.extend((0..=max_depth).map(|k| format!("depth_p{k}")));
    cols.extend((1..=max_depth).map(|k| format!("entropy_l{k}")));
    cols.push("mean_sigma_low".into());
    cols.push("mean_sigma_high".into());
    cols.join(",")
}

pub fn metrics_csv(max_depth: usize, rows: &[EpochMetrics]) -> String {
    let mut out = metrics_header(max_depth);
    out.push('\n');
    for r in rows {
        let mut cells = vec![r.epoch.to_string(), r.t.to_string(), r.train_loss.to_string(), r.val_loss.to_string()];
        cells.extend(r.depth_probs.iter().map(f64::to_string));
        cells.extend(r.layer_entropy.iter().map(f64::to_string));
        cells.push(r.mean_sigma_low.to_string());
        cells.push(r.mean_sigma_high.to_string());
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub params: PolicyParams,
    pub theta: Vec<f64>,
    pub metrics: Vec<EpochMetrics>,
    pub skipped_steps: usize,
}

pub fn build_pool(workers: usize) -> Result<ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op: what.to_string() })
    }
}

/// Alternate classifier and policy updates for `cfg.epochs` epochs.
/// `on_epoch` sees each epoch's metrics as soon as they are computed.
pub fn search_loop(
    cfg: &SearchConfig,
    train: &LabeledDataset,
    val: &LabeledDataset,
    on_epoch: &mut dyn FnMut(&[EpochMetrics]) -> Result<()>,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    if train.len() < cfg.batch_size.min(2) || val.is_empty() {
        return Err(Error::Config(format!(
            "dataset too small: {} training and {} validation samples",
            train.len(),
            val.len()
        )));
    }
    let pool = build_pool(cfg.workers)?;
    let spec = ClassifierSpec::new(train.dims(), train.class_count.max(val.class_count))?;
    let mut theta = spec.init(cfg.seed);
    let mut params = cfg.initial_policy()?;
    let layout = PhiLayout::of(&params);
    let mut sgd = Sgd::new(cfg.momentum, true, cfg.weight_decay);
    let mut phi_opt = PhiOptimizer::new(&params, cfg.phi_lr);
    let frozen = cfg.frozen();
    let iters = cfg.schedule.sinkhorn_iters;
    let steps = train.len().div_ceil(cfg.batch_size);
    let total_steps = steps * cfg.epochs;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut skipped = 0;
    let mut val_order: Vec<usize> = Vec::new();
    let mut val_at = 0;

    for epoch in 0..cfg.epochs {
        let t = anneal_temperature(epoch, cfg.epochs, &cfg.schedule)?;
        let mut active = warmup_gate(epoch, cfg.epochs, &cfg.schedule);
        for g in ParamGroup::ALL {
            if frozen.contains(g) {
                active.remove(g);
            }
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(cfg.seed, "search-batches", &[epoch as u64]));
        let (mut train_sum, mut val_sum) = (0.0, 0.0);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut val_batch = Vec::with_capacity(cfg.batch_size);
            while val_batch.len() < cfg.batch_size.min(val.len()) {
                if val_at == val_order.len() {
                    val_order = (0..val.len()).collect();
                    val_order.shuffle(&mut stream(cfg.seed, "search-val", &[epoch as u64, step as u64]));
                    val_at = 0;
                }
                val_batch.push(val_order[val_at]);
                val_at += 1;
            }
            let mut rng = stream(cfg.seed, "policy", &[epoch as u64, step as u64]);
            let noise = batch_noise(&params, batch.len(), cfg.sampling, &mut rng);
            let problem = SearchProblem {
                spec,
                params: &params,
                layout: layout.clone(),
                active,
                t,
                iters,
                train: AugmentedBatch { data: train, indices: batch, noise: &noise },
                val,
                val_indices: &val_batch,
                pool: &pool,
            };
            let (grad_theta, delta_phi, train_loss) = if active.is_empty() {
                let (l, g) = problem.train_theta_grad(&theta)?;
                (g, None, l)
            } else {
                let h = hypergradient(&problem, &theta, cfg.eta, &cfg.hypergrad)?;
                if h.delta_phi.is_none() {
                    skipped += 1;
                }
                (h.grad_theta, h.delta_phi, h.train_loss)
            };
            let (val_loss, _) = problem.val_theta_grad(&theta)?;
            train_sum += train_loss;
            val_sum += val_loss;
            let lr = cosine_lr(cfg.lr_theta, epoch * steps + step, total_steps);
            sgd.step(&mut theta, &grad_theta, lr);
            if let Some(d) = delta_phi {
                check_finite(&d, "hypergradient")?;
                phi_opt.step(&mut params, &d, active);
            }
        }
        check_finite(&theta, "classifier parameters")?;
        params.validate()?;
        metrics.push(EpochMetrics::snapshot(
            epoch,
            t.get(),
            train_sum / steps as f64,
            val_sum / steps as f64,
            &params,
            iters,
        ));
        log::info!(
            "epoch {epoch}: t={:.4} train={:.4} val={:.4}",
            t.get(),
            train_sum / steps as f64,
            val_sum / steps as f64
        );
        on_epoch(&metrics)?;
    }
    Ok(SearchOutcome { params, theta, metrics, skipped_steps: skipped })
}

// ---------------------------------------------------------------------------
// evaluation: train a fresh classifier with a fixed augmentation

#[derive(Debug, Clone, PartialEq)]
pub enum Augmentation {
    None,
    Policy { params: PolicyParams, settings: EvalSettings },
    /// Random Rotate with a uniform magnitude over its whole range.
    RandomRotate,
}

impl Augmentation {
    fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Result<HardPolicy> {
        match self {
            Augmentation::None => Ok(HardPolicy { ops: Vec::new() }),
            Augmentation::Policy { params, settings } => {
                let z = PolicyNoise::draw(params, rng);
                sample_hard(params, Temperature::new(settings.temperature_eval)?, settings.sinkhorn_iters, &z)
            }
            Augmentation::RandomRotate => {
                let rotate = transforms::registry().iter().position(|s| s.name == "Rotate").expect("Rotate registered");
                Ok(HardPolicy { ops: vec![(rotate, rng.random::<f64>())] })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 32, lr: 0.1, momentum: 0.9, weight_decay: 5e-4, workers: 1 }
    }
}

/// Train a classifier from scratch on `train` with `aug` applied per image,
/// and return its accuracy on `val`.
pub fn train_and_evaluate(
    train: &LabeledDataset,
    val: &LabeledDataset,
    aug: &Augmentation,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(Error::Config("epochs, batch size and learning rate must be positive".into()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let pool = build_pool(cfg.workers)?;
    let spec = ClassifierSpec::new(train.dims(), train.class_count.max(val.class_count))?;
    let mut theta = spec.init(seed);
    let mut sgd = Sgd::new(cfg.momentum, true, cfg.weight_decay);
    let steps = train.len().div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(seed, "eval-batches", &[epoch as u64]));
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let images = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| {
                        let mut rng = stream(seed, "eval-augment", &[epoch as u64, i as u64]);
                        let policy = aug.sample(&mut rng)?;
                        Ok((apply_hard(train.images.image(i), train.dims(), &policy)?, train.labels[i]))
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let (_, g) = theta_grad_batch(&pool, &spec, &theta, &images)?;
            sgd.step(&mut theta, &g, cosine_lr(cfg.lr, epoch * steps + step, steps * cfg.epochs));
        }
        check_finite(&theta, "classifier parameters")?;
    }
    spec.accuracy(&theta, val)
}

/// Total variance (summed over coordinates) of the batch-mean `phi`
/// gradient across `resamples` independent policy draws.
#[allow(clippy::too_many_arguments)]
pub fn policy_gradient_variance(
    data: &LabeledDataset,
    indices: &[usize],
    params: &PolicyParams,
    t: Temperature,
    iters: usize,
    mode: SamplingMode,
    resamples: usize,
    workers: usize,
    seed: u64,
) -> Result<f64> {
    let pool = build_pool(workers)?;
    let spec = ClassifierSpec::new(data.dims(), data.class_count)?;
    let theta = spec.init(seed);
    let layout = PhiLayout::of(params);
    let mut sum = vec![0.0; layout.len()];
    let mut sum_sq = vec![0.0; layout.len()];
    for r in 0..resamples {
        let mut rng = stream(seed, "variance", &[r as u64]);
        let noise = batch_noise(params, indices.len(), mode, &mut rng);
        let parts = pool.install(|| {
            indices
                .par_iter()
                .zip(noise.par_iter())
                .map(|(&i, z)| {
                    phi_grad_image(
                        &spec,
                        &theta,
                        params,
                        &layout,
                        GroupSet::all(),
                        t,
                        iters,
                        data.images.image(i),
                        data.labels[i],
                        z,
                        ApplyMode::Full,
                    )
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let (_, g) = sum_in_order(parts, layout.len());
        for ((s, q), x) in sum.iter_mut().zip(sum_sq.iter_mut()).zip(&g) {
            *s += x;
            *q += x * x;
        }
    }
    let n = resamples as f64;
    Ok(sum.iter().zip(&sum_sq).map(|(s, q)| (q - s * s / n) / (n - 1.0)).sum())
}
