//! Augmentation policies: parameters, per-image sampling, the layered
//! mixture that applies a sample, schedules, and the policy file.
//!
//! A policy over `N` transforms with maximal depth `K` is sampled as a depth
//! one-hot `d` (length `K + 1`), an `N x K` hardened near-permutation `P` and
//! an `N x K` magnitude matrix `M`. It is applied as
//!
//! ```text
//! X_k = sum_i P[i, k] * tau_i(X_{k-1}, M[i, k])      k = 1..K
//! X'  = sum_k d[k] * X_k                             k = 0..K
//! ```

use std::io;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DiffTensor, Tape};
use crate::error::{Error, Result};
use crate::relaxations::{
    draw_logistic, draw_normal, draw_uniform, gumbel_from_uniform, gumbel_sigmoid_hard, gumbel_sinkhorn_sample,
    gumbel_softmax_hard, sample_magnitude, sample_magnitude_gaussian, softmax, Temperature, PAD_VALUE, SINKHORN_FLOOR,
};
use crate::transforms::{self, registry, Dims, ImageBatch};

pub const DEFAULT_MAX_DEPTH: usize = 7;
pub const DEFAULT_SINKHORN_ITERS: usize = 20;
pub const DEFAULT_T_EVAL: f64 = 0.1;
/// Magnitude bounds start at `sigmoid(l) = 0.125`, `sigmoid(u) = 0.875`.
pub const INIT_LOW: f64 = 0.125;
pub const INIT_HIGH: f64 = 0.875;
/// Gaussian variant: mean 0.5 and a std that puts 95% of draws in (0.125, 0.875).
pub const INIT_GAUSS_MEAN: f64 = 0.5;
pub const INIT_GAUSS_STD: f64 = 0.1875;
pub const MIN_GAUSS_STD: f64 = 1e-3;
/// Bernoulli depth gates start with application probability 0.75.
pub const INIT_GATE_PROB: f64 = 0.75;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MagnitudeDist {
    #[default]
    Uniform,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DepthMode {
    #[default]
    Categorical,
    Bernoulli,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMagnitude {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Learnable policy parameters. Matrices are `N x K`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub num_types: usize,
    pub max_depth: usize,
    /// Depth logits, length `K + 1` (unused in the Bernoulli depth mode).
    pub delta: Vec<f64>,
    pub pi: Vec<f64>,
    pub mu_low: Vec<f64>,
    pub mu_high: Vec<f64>,
    /// Replaces `mu_low`/`mu_high` when present.
    pub gaussian: Option<GaussianMagnitude>,
    /// Per-layer gate logits, length `K`; replaces `delta` when present.
    pub gates: Option<Vec<f64>>,
}

impl PolicyParams {
    /// Uniform depth and type/order logits, magnitudes spanning (0.125, 0.875).
    pub fn init(max_depth: usize, magnitude: MagnitudeDist, depth: DepthMode) -> Result<Self> {
        let n = registry().len();
        if max_depth == 0 {
            return Err(Error::Config("max depth must be at least 1".into()));
        }
        if max_depth > n {
            return Err(Error::Config(format!("max depth K={max_depth} exceeds the number of transforms N={n}")));
        }
        let nk = n * max_depth;
        Ok(Self {
            num_types: n,
            max_depth,
            delta: vec![0.0; max_depth + 1],
            pi: vec![0.0; nk],
            mu_low: vec![logit(INIT_LOW); nk],
            mu_high: vec![logit(INIT_HIGH); nk],
            gaussian: (magnitude == MagnitudeDist::Gaussian).then(|| GaussianMagnitude {
                mean: vec![INIT_GAUSS_MEAN; nk],
                std: vec![INIT_GAUSS_STD; nk],
            }),
            gates: (depth == DepthMode::Bernoulli).then(|| vec![logit(INIT_GATE_PROB); max_depth]),
        })
    }

    pub fn magnitude_dist(&self) -> MagnitudeDist {
        if self.gaussian.is_some() {
            MagnitudeDist::Gaussian
        } else {
            MagnitudeDist::Uniform
        }
    }

    pub fn depth_mode(&self) -> DepthMode {
        if self.gates.is_some() {
            DepthMode::Bernoulli
        } else {
            DepthMode::Categorical
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, k) = (self.num_types, self.max_depth);
        let bad = |what: &str| Err(Error::Parameter(format!("{what} has the wrong length")));
        if n != registry().len() {
            return Err(Error::Parameter(format!("policy has {n} types, expected {}", registry().len())));
        }
        if k == 0 || k > n {
            return Err(Error::Parameter(format!("max depth {k} outside 1..={n}")));
        }
        if self.delta.len() != k + 1 {
            return bad("delta");
        }
        for (name, v) in [("pi", &self.pi), ("mu_low", &self.mu_low), ("mu_high", &self.mu_high)] {
            if v.len() != n * k {
                return bad(name);
            }
        }
        if let Some(g) = &self.gaussian {
            if g.mean.len() != n * k || g.std.len() != n * k {
                return bad("gaussian magnitude");
            }
            if g.std.iter().any(|s| *s <= 0.0) {
                return Err(Error::Parameter("gaussian magnitude std must be positive".into()));
            }
        }
        if let Some(g) = &self.gates {
            if g.len() != k {
                return bad("gates");
            }
        }
        if self.flat().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "policy parameters".into() });
        }
        Ok(())
    }

    fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        let g = self.gaussian.iter().flat_map(|g| g.mean.iter().chain(&g.std));
        self.delta
            .iter()
            .chain(&self.pi)
            .chain(&self.mu_low)
            .chain(&self.mu_high)
            .chain(g)
            .chain(self.gates.iter().flatten())
            .copied()
    }

    /// Depth distribution: `softmax(delta)`, or the distribution of the number
    /// of open gates in the Bernoulli mode.
    pub fn depth_probs(&self) -> Vec<f64> {
        match &self.gates {
            None => softmax(&self.delta),
            Some(gates) => {
                let mut dist = vec![0.0; gates.len() + 1];
                dist[0] = 1.0;
                for (j, a) in gates.iter().enumerate() {
                    let p = crate::autodiff::sigmoid(*a);
                    for c in (0..=j + 1).rev() {
                        let keep = dist[c] * (1.0 - p);
                        let take = if c > 0 { dist[c - 1] * p } else { 0.0 };
                        dist[c] = keep + take;
                    }
                }
                dist
            }
        }
    }

    /// Per-layer transform marginals: column `k` of the noise-free Sinkhorn
    /// matrix at unit temperature, returned as `K` rows of length `N`.
    pub fn layer_marginals(&self, iters: usize) -> Vec<Vec<f64>> {
        let (n, k) = (self.num_types, self.max_depth);
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let v = if j < k { self.pi[i * k + j] } else { PAD_VALUE };
                m[i * n + j] = v.exp().max(SINKHORN_FLOOR);
            }
        }
        for _ in 0..iters {
            for row in m.chunks_mut(n) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            for j in 0..n {
                let s: f64 = (0..n).map(|i| m[i * n + j]).sum();
                (0..n).for_each(|i| m[i * n + j] /= s);
            }
        }
        (0..k).map(|j| (0..n).map(|i| m[i * n + j]).collect()).collect()
    }

    /// `[sigmoid(l), sigmoid(u)]` per entry (or `mean -/+ 2 std` clamped for the Gaussian variant).
    pub fn magnitude_intervals(&self) -> Vec<(f64, f64)> {
        match &self.gaussian {
            None => self
                .mu_low
                .iter()
                .zip(&self.mu_high)
                .map(|(l, u)| (crate::autodiff::sigmoid(*l), crate::autodiff::sigmoid(*u)))
                .collect(),
            Some(g) => g
                .mean
                .iter()
                .zip(&g.std)
                .map(|(m, s)| ((m - 2.0 * s).max(0.0), (m + 2.0 * s).min(1.0)))
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// schedules

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupFracs {
    pub mu: f64,
    pub pi: f64,
    pub delta: f64,
}

impl Default for WarmupFracs {
    /// 50, 65 and 80 out of 300 epochs.
    fn default() -> Self {
        Self { mu: 50.0 / 300.0, pi: 65.0 / 300.0, delta: 80.0 / 300.0 }
    }
}

impl WarmupFracs {
    pub fn none() -> Self {
        Self { mu: 0.0, pi: 0.0, delta: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub t_start: f64,
    pub t_end: f64,
    pub t_eval: f64,
    pub sinkhorn_iters: usize,
    pub warmup: WarmupFracs,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            t_start: 1.0,
            t_end: 0.5,
            t_eval: DEFAULT_T_EVAL,
            sinkhorn_iters: DEFAULT_SINKHORN_ITERS,
            warmup: WarmupFracs::default(),
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_end > 0.0 && self.t_start >= self.t_end && self.t_start.is_finite()) {
            return Err(Error::Config(format!(
                "temperatures must satisfy t_start >= t_end > 0, got {} and {}",
                self.t_start, self.t_end
            )));
        }
        if !(self.t_eval > 0.0 && self.t_eval.is_finite()) {
            return Err(Error::Config(format!("evaluation temperature must be positive, got {}", self.t_eval)));
        }
        if self.sinkhorn_iters == 0 {
            return Err(Error::Config("sinkhorn iterations must be at least 1".into()));
        }
        let w = self.warmup;
        let in_unit = |f: f64| (0.0..=1.0).contains(&f);
        if !(in_unit(w.mu) && in_unit(w.pi) && in_unit(w.delta) && w.mu <= w.pi && w.pi <= w.delta) {
            return Err(Error::Config(format!(
                "warm-up fractions must satisfy 0 <= mu <= pi <= delta <= 1, got {} {} {}",
                w.mu, w.pi, w.delta
            )));
        }
        Ok(())
    }
}

/// `t(e) = t_start * (t_end / t_start)^(e / total)`.
pub fn anneal_temperature(epoch: usize, total: usize, sched: &ScheduleConfig) -> Result<Temperature> {
    if total == 0 || epoch > total {
        return Err(Error::Parameter(format!("epoch {epoch} outside 0..={total}")));
    }
    let frac = epoch as f64 / total as f64;
    Temperature::new(sched.t_start * (sched.t_end / sched.t_start).powf(frac))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Magnitude,
    Types,
    Depth,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Magnitude, ParamGroup::Types, ParamGroup::Depth];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Magnitude => "mu",
            ParamGroup::Types => "pi",
            ParamGroup::Depth => "delta",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter group `{s}` (expected mu, pi or delta)")))
    }
}

/// Which policy groups receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GroupSet {
    pub magnitude: bool,
    pub types: bool,
    pub depth: bool,
}

impl GroupSet {
    pub fn all() -> Self {
        Self { magnitude: true, types: true, depth: true }
    }

    pub fn contains(&self, g: ParamGroup) -> bool {
        match g {
            ParamGroup::Magnitude => self.magnitude,
            ParamGroup::Types => self.types,
            ParamGroup::Depth => self.depth,
        }
    }

    pub fn remove(&mut self, g: ParamGroup) {
        match g {
            ParamGroup::Magnitude => self.magnitude = false,
            ParamGroup::Types => self.types = false,
            ParamGroup::Depth => self.depth = false,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.magnitude || self.types || self.depth)
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        ParamGroup::ALL.into_iter().filter(|g| self.contains(*g)).collect()
    }
}

/// Groups whose warm-up has elapsed at `epoch` of `total`. The classifier always updates.
pub fn warmup_gate(epoch: usize, total: usize, sched: &ScheduleConfig) -> GroupSet {
    let frac = if total == 0 { 1.0 } else { epoch as f64 / total as f64 };
    let w = sched.warmup;
    GroupSet { magnitude: frac >= w.mu, types: frac >= w.pi, depth: frac >= w.delta }
}

// ---------------------------------------------------------------------------
// sampling

/// All randomness needed for one policy draw.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNoise {
    /// Gumbel noise over depths (`K + 1`); empty in the Bernoulli mode.
    pub depth: Vec<f64>,
    /// Gumbel noise over the padded `N x N` logit matrix.
    pub perm: Vec<f64>,
    /// Uniform or standard-normal draws, `N x K`.
    pub magnitude: Vec<f64>,
    /// Logistic noise for the gates (`K`); empty in the categorical mode.
    pub gates: Vec<f64>,
}

impl PolicyNoise {
    pub fn draw<R: Rng + ?Sized>(params: &PolicyParams, rng: &mut R) -> Self {
        let (n, k) = (params.num_types, params.max_depth);
        let gumbel = |len: usize, rng: &mut R| (0..len).map(|_| gumbel_from_uniform(rng.random())).collect();
        let depth = if params.gates.is_some() { Vec::new() } else { gumbel(k + 1, rng) };
        let perm = gumbel(n * n, rng);
        let magnitude = match params.magnitude_dist() {
            MagnitudeDist::Uniform => draw_uniform(n * k, rng),
            MagnitudeDist::Gaussian => draw_normal(n * k, rng),
        };
        let gates = if params.gates.is_some() { draw_logistic(k, rng) } else { Vec::new() };
        Self { depth, perm, magnitude, gates }
    }
}

/// Policy parameters recorded on a tape. Groups outside `trainable` are constants.
#[derive(Debug, Clone)]
pub struct PhiTensors {
    pub delta: DiffTensor,
    pub pi: DiffTensor,
    pub mu_low: DiffTensor,
    pub mu_high: DiffTensor,
    pub gauss_mean: Option<DiffTensor>,
    pub gauss_std: Option<DiffTensor>,
    pub gates: Option<DiffTensor>,
}

impl PhiTensors {
    pub fn record(tape: &mut Tape, params: &PolicyParams, trainable: GroupSet) -> Result<Self> {
        let (n, k) = (params.num_types, params.max_depth);
        let mut put = |v: &[f64], shape: &[usize], grad: bool| {
            if grad {
                tape.leaf(v.to_vec(), shape)
            } else {
                tape.constant(v.to_vec(), shape)
            }
        };
        let delta = put(&params.delta, &[k + 1], trainable.depth)?;
        let pi = put(&params.pi, &[n, k], trainable.types)?;
        let mu_low = put(&params.mu_low, &[n, k], trainable.magnitude)?;
        let mu_high = put(&params.mu_high, &[n, k], trainable.magnitude)?;
        let (gauss_mean, gauss_std) = match &params.gaussian {
            Some(g) => (
                Some(put(&g.mean, &[n, k], trainable.magnitude)?),
                Some(put(&g.std, &[n, k], trainable.magnitude)?),
            ),
            None => (None, None),
        };
        let gates = match &params.gates {
            Some(g) => Some(put(g, &[k], trainable.depth)?),
            None => None,
        };
        Ok(Self { delta, pi, mu_low, mu_high, gauss_mean, gauss_std, gates })
    }
}

/// One realized draw on a tape.
#[derive(Debug, Clone)]
pub struct PolicySample {
    /// Hard depth one-hot, length `K + 1` (categorical mode).
    pub d: Option<DiffTensor>,
    /// Hard per-layer gates, length `K` (Bernoulli mode).
    pub gates: Option<DiffTensor>,
    /// Hard `N x K` permutation sample.
    pub p: DiffTensor,
    /// `N x K` magnitudes in `(0, 1)`.
    pub m: DiffTensor,
    pub num_types: usize,
    pub max_depth: usize,
    /// Transform index selected at each layer.
    pub rows: Vec<usize>,
    /// Layers that are applied, in order.
    pub active: Vec<usize>,
}

/// Draw `(d, P, M)` from `phi` at temperature `t` with `iters` Sinkhorn iterations.
pub fn sample_policy(
    tape: &mut Tape,
    phi: &PhiTensors,
    t: Temperature,
    iters: usize,
    noise: &PolicyNoise,
) -> Result<PolicySample> {
    let (num_types, max_depth) = {
        let s = tape.shape(phi.pi);
        (s[0], s[1])
    };
    let perm = gumbel_sinkhorn_sample(tape, phi.pi, t, iters, &noise.perm)?;
    let m = match (phi.gauss_mean, phi.gauss_std) {
        (Some(mean), Some(std)) => sample_magnitude_gaussian(tape, mean, std, &noise.magnitude)?,
        _ => sample_magnitude(tape, phi.mu_low, phi.mu_high, &noise.magnitude)?,
    };
    let (d, gates, active) = match phi.gates {
        None => {
            let draw = gumbel_softmax_hard(tape, phi.delta, t, &noise.depth)?;
            (Some(draw.hard), None, (0..draw.index).collect())
        }
        Some(logits) => {
            if noise.gates.len() != max_depth {
                return Err(Error::ShapeMismatch { op: "gates", lhs: vec![max_depth], rhs: vec![noise.gates.len()] });
            }
            let (_, hard) = gumbel_sigmoid_hard(tape, logits, t, &noise.gates)?;
            let active = tape.value(hard).iter().enumerate().filter(|(_, g)| **g == 1.0).map(|(k, _)| k).collect();
            (None, Some(hard), active)
        }
    };
    Ok(PolicySample { d, gates, p: perm.hard, m, num_types, max_depth, rows: perm.rows, active })
}

/// A forward-only policy: the transforms to apply, in order, with their
/// normalized magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct HardPolicy {
    pub ops: Vec<(usize, f64)>,
}

impl PolicySample {
    pub fn hard(&self, tape: &Tape) -> HardPolicy {
        let m = tape.value(self.m);
        let k = self.max_depth;
        HardPolicy { ops: self.active.iter().map(|&l| (self.rows[l], m[self.rows[l] * k + l])).collect() }
    }

    pub fn depth(&self) -> usize {
        self.active.len()
    }
}

/// Sample a policy without recording gradients.
pub fn sample_hard(params: &PolicyParams, t: Temperature, iters: usize, noise: &PolicyNoise) -> Result<HardPolicy> {
    let mut tape = Tape::new();
    let phi = PhiTensors::record(&mut tape, params, GroupSet::default())?;
    let s = sample_policy(&mut tape, &phi, t, iters, noise)?;
    Ok(s.hard(&tape))
}

/// Apply a hard policy by composing its transforms.
pub fn apply_hard(image: &[f64], dims: Dims, policy: &HardPolicy) -> Result<Vec<f64>> {
    let reg = registry();
    let mut x = image.to_vec();
    for &(i, m) in &policy.ops {
        x = transforms::apply_value(&reg[i], &x, dims, m)?;
    }
    Ok(x)
}

/// How [`apply_policy`] evaluates each layer's mixture.
///
/// All modes produce the same forward value. `Literal` records every
/// transform of every layer as a differentiable node. `Full` evaluates all
/// `N` transforms at each applied layer but records only the selected one as
/// differentiable, which yields the same gradients since unselected branches
/// carry zero weight. `Selected` evaluates only the selected transform per
/// layer: gradients for depth and magnitudes are unchanged, but the type
/// logits only see the selected entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplyMode {
    Literal,
    Full,
    Selected,
}

/// Apply `s` to a single `[C, H, W]` image on the tape.
pub fn apply_policy(tape: &mut Tape, x0: DiffTensor, s: &PolicySample, mode: ApplyMode) -> Result<DiffTensor> {
    let reg = registry();
    let (n, k) = (s.num_types, s.max_depth);
    let shape = tape.shape(x0).to_vec();
    let dims = match shape[..] {
        [c, h, w] => Dims::new(c, h, w),
        _ => return Err(Error::ShapeMismatch { op: "apply_policy", lhs: shape, rhs: vec![] }),
    };
    // Last layer that can receive a gradient; deeper layers only need values.
    let reach = match s.d {
        Some(_) => s.active.len(),
        None => k,
    };
    let mut layers = Vec::with_capacity(k + 1);
    layers.push(x0);
    let mut x = x0;
    for layer in 0..k {
        let sel = s.rows[layer];
        let y = if layer >= reach && mode != ApplyMode::Literal {
            let v = transforms::apply_value(&reg[sel], tape.value(x), dims, tape.value(s.m)[sel * k + layer])?;
            tape.constant(v, &shape)?
        } else {
            let col = tape.slice(s.p, 1, layer, 1)?;
            let col = tape.reshape(col, &[n])?;
            match mode {
                ApplyMode::Selected => {
                    let w = tape.element(col, sel)?;
                    let w = tape.reshape(w, &[1])?;
                    let mi = tape.element(s.m, sel * k + layer)?;
                    let item = transforms::apply(tape, &reg[sel], x, mi)?;
                    tape.weighted_sum(w, &[item])?
                }
                ApplyMode::Full | ApplyMode::Literal => {
                    let mut items = Vec::with_capacity(n);
                    for (i, spec) in reg.iter().enumerate().take(n) {
                        let item = if i == sel || mode == ApplyMode::Literal {
                            let mi = tape.element(s.m, i * k + layer)?;
                            transforms::apply(tape, spec, x, mi)?
                        } else {
                            let v = transforms::apply_value(spec, tape.value(x), dims, tape.value(s.m)[i * k + layer])?;
                            tape.constant(v, &shape)?
                        };
                        items.push(item);
                    }
                    tape.weighted_sum(col, &items)?
                }
            }
        };
        x = match s.gates {
            None => y,
            Some(g) => {
                let on = tape.element(g, layer)?;
                let on = tape.reshape(on, &[1])?;
                let off = tape.neg(on)?;
                let off = tape.offset(off, 1.0)?;
                let w = tape.concat(&[on, off], 0)?;
                tape.weighted_sum(w, &[y, x])?
            }
        };
        layers.push(x);
    }
    match s.d {
        Some(d) => tape.weighted_sum(d, &layers),
        None => Ok(x),
    }
}

/// Per-image or per-batch policy draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplingMode {
    #[default]
    PerImage,
    PerBatch,
}

/// Draw noise for a batch of `len` images.
pub fn batch_noise<R: Rng + ?Sized>(params: &PolicyParams, len: usize, mode: SamplingMode, rng: &mut R) -> Vec<PolicyNoise> {
    match mode {
        SamplingMode::PerImage => (0..len).map(|_| PolicyNoise::draw(params, rng)).collect(),
        SamplingMode::PerBatch => {
            let shared = PolicyNoise::draw(params, rng);
            vec![shared; len]
        }
    }
}

/// Augment every image of `x` with a freshly sampled hard policy.
pub fn apply_policy_batch<R: Rng + ?Sized>(
    x: &ImageBatch,
    params: &PolicyParams,
    t: Temperature,
    iters: usize,
    rng: &mut R,
    mode: SamplingMode,
) -> Result<ImageBatch> {
    let noise = batch_noise(params, x.len, mode, rng);
    let mut out = ImageBatch::new(x.dims);
    out.data.reserve(x.data.len());
    let mut cached: Option<HardPolicy> = None;
    for (i, z) in noise.iter().enumerate() {
        let policy = match (&cached, mode) {
            (Some(p), SamplingMode::PerBatch) => p.clone(),
            _ => sample_hard(params, t, iters, z)?,
        };
        out.push(&apply_hard(x.image(i), x.dims, &policy)?)?;
        cached = Some(policy);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// policy file

/// Evaluation settings stored next to the parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub temperature_eval: f64,
    pub sinkhorn_iters: usize,
}

impl From<&ScheduleConfig> for EvalSettings {
    fn from(s: &ScheduleConfig) -> Self {
        Self { temperature_eval: s.t_eval, sinkhorn_iters: s.sinkhorn_iters }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyDoc {
    version: String,
    num_types: usize,
    max_depth: usize,
    transform_names: Vec<String>,
    delta: Vec<f64>,
    pi: Vec<Vec<f64>>,
    mu_low: Vec<Vec<f64>>,
    mu_high: Vec<Vec<f64>>,
    temperature_eval: f64,
    sinkhorn_iters: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gaussian_mean: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gaussian_std: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth_gates: Option<Vec<f64>>,
}

fn rows(v: &[f64], k: usize) -> Vec<Vec<f64>> {
    v.chunks(k).map(<[f64]>::to_vec).collect()
}

fn parse_err(path: &str, message: impl Into<String>) -> Error {
    Error::Parse { path: path.to_string(), message: message.into() }
}

fn flatten(name: &str, m: Vec<Vec<f64>>, n: usize, k: usize) -> Result<Vec<f64>> {
    if m.len() != n {
        return Err(parse_err(name, format!("expected {n} rows, found {}", m.len())));
    }
    let mut out = Vec::with_capacity(n * k);
    for (i, row) in m.into_iter().enumerate() {
        if row.len() != k {
            return Err(parse_err(&format!("{name}[{i}]"), format!("expected {k} columns, found {}", row.len())));
        }
        out.extend(row);
    }
    Ok(out)
}

/// JSON formatter: pretty layout, every float written with 17 significant digits.
struct PolicyFormatter(serde_json::ser::PrettyFormatter<'static>);

impl serde_json::ser::Formatter for PolicyFormatter {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }
    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn serialize_policy(params: &PolicyParams, eval: EvalSettings) -> Result<String> {
    params.validate()?;
    if !(eval.temperature_eval > 0.0 && eval.temperature_eval.is_finite()) {
        return Err(Error::Parameter(format!("evaluation temperature must be positive, got {}", eval.temperature_eval)));
    }
    let k = params.max_depth;
    let doc = PolicyDoc {
        version: "1".into(),
        num_types: params.num_types,
        max_depth: k,
        transform_names: registry().iter().map(|s| s.name.to_string()).collect(),
        delta: params.delta.clone(),
        pi: rows(&params.pi, k),
        mu_low: rows(&params.mu_low, k),
        mu_high: rows(&params.mu_high, k),
        temperature_eval: eval.temperature_eval,
        sinkhorn_iters: eval.sinkhorn_iters,
        gaussian_mean: params.gaussian.as_ref().map(|g| rows(&g.mean, k)),
        gaussian_std: params.gaussian.as_ref().map(|g| rows(&g.std, k)),
        depth_gates: params.gates.clone(),
    };
    let mut buf = Vec::new();
    let fmt = PolicyFormatter(serde_json::ser::PrettyFormatter::with_indent(b"  "));
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, fmt);
    doc.serialize(&mut ser).map_err(|e| Error::Parameter(e.to_string()))?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("json output is utf-8"))
}

pub fn deserialize_policy(text: &str) -> Result<(PolicyParams, EvalSettings)> {
    let mut de = serde_json::Deserializer::from_str(text);
    let doc: PolicyDoc = serde_path_to_error::deserialize(&mut de)
        .map_err(|e| parse_err(&e.path().to_string(), e.inner().to_string()))?;
    de.end().map_err(|e| parse_err(".", e.to_string()))?;
    if doc.version != "1" {
        return Err(parse_err("version", format!("unsupported version `{}`, expected \"1\"", doc.version)));
    }
    let n = registry().len();
    if doc.num_types != n {
        return Err(parse_err("num_types", format!("expected {n}, found {}", doc.num_types)));
    }
    let k = doc.max_depth;
    if k == 0 || k > n {
        return Err(parse_err("max_depth", format!("must be in 1..={n}, found {k}")));
    }
    let names: Vec<&str> = registry().iter().map(|s| s.name).collect();
    if doc.transform_names != names {
        return Err(parse_err("transform_names", format!("expected {names:?}")));
    }
    if doc.delta.len() != k + 1 {
        return Err(parse_err("delta", format!("expected {} entries, found {}", k + 1, doc.delta.len())));
    }
    if doc.temperature_eval.is_nan() || doc.temperature_eval <= 0.0 {
        return Err(parse_err("temperature_eval", "must be positive"));
    }
    if doc.sinkhorn_iters == 0 {
        return Err(parse_err("sinkhorn_iters", "must be at least 1"));
    }
    let gaussian = match (doc.gaussian_mean, doc.gaussian_std) {
        (Some(m), Some(s)) => Some(GaussianMagnitude {
            mean: flatten("gaussian_mean", m, n, k)?,
            std: flatten("gaussian_std", s, n, k)?,
        }),
        (None, None) => None,
        (Some(_), None) => return Err(parse_err("gaussian_std", "missing while gaussian_mean is present")),
        (None, Some(_)) => return Err(parse_err("gaussian_mean", "missing while gaussian_std is present")),
    };
    let params = PolicyParams {
        num_types: n,
        max_depth: k,
        delta: doc.delta,
        pi: flatten("pi", doc.pi, n, k)?,
        mu_low: flatten("mu_low", doc.mu_low, n, k)?,
        mu_high: flatten("mu_high", doc.mu_high, n, k)?,
        gaussian,
        gates: doc.depth_gates,
    };
    params.validate().map_err(|e| parse_err(".", e.to_string()))?;
    Ok((params, EvalSettings { temperature_eval: doc.temperature_eval, sinkhorn_iters: doc.sinkhorn_iters }))
}
