//! The fourteen elementary image transformations of the search space.
//!
//! Every kernel works on a single `[C, H, W]` image with values in `[0, 1]`,
//! takes its magnitude normalized to `(0, 1)` and rescales it to the native
//! range listed in [`registry`]. Geometric transforms are inverse affine
//! warps with bilinear interpolation and zero fill, photometric transforms are
//! pointwise or use per-image statistics. Outputs are clamped to `[0, 1]`.
//!
//! Posterize and Solarize are not differentiable in their magnitude; their
//! magnitude receives a straight-through unit gradient per output pixel.
//! Posterize and Equalize quantize to 256 levels and pass the output gradient
//! straight through to the input pixels.

use crate::autodiff::{DiffTensor, Tape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransformKind {
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Rotate,
    Solarize,
    Posterize,
    Contrast,
    Color,
    Brightness,
    Sharpness,
    AutoContrast,
    Invert,
    Equalize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub name: &'static str,
    /// Native magnitude range `(low, high)`; `None` for magnitude-free transforms.
    pub native_range: Option<(f64, f64)>,
    pub magnitude_differentiable: bool,
}

const fn spec(kind: TransformKind, name: &'static str, range: Option<(f64, f64)>, diff: bool) -> TransformSpec {
    TransformSpec { kind, name, native_range: range, magnitude_differentiable: diff }
}

static REGISTRY: [TransformSpec; 14] = [
    spec(TransformKind::ShearX, "ShearX", Some((-0.6, 0.6)), true),
    spec(TransformKind::ShearY, "ShearY", Some((-0.6, 0.6)), true),
    spec(TransformKind::TranslateX, "TranslateX", Some((-0.5, 0.5)), true),
    spec(TransformKind::TranslateY, "TranslateY", Some((-0.5, 0.5)), true),
    spec(TransformKind::Rotate, "Rotate", Some((-30.0, 30.0)), true),
    spec(TransformKind::Solarize, "Solarize", Some((0.6, 1.0)), false),
    spec(TransformKind::Posterize, "Posterize", Some((2.0, 8.0)), false),
    spec(TransformKind::Contrast, "Contrast", Some((0.4, 2.0)), true),
    spec(TransformKind::Color, "Color", Some((0.0, 1.0)), true),
    spec(TransformKind::Brightness, "Brightness", Some((-0.4, 0.4)), true),
    spec(TransformKind::Sharpness, "Sharpness", Some((0.0, 2.0)), true),
    spec(TransformKind::AutoContrast, "AutoContrast", None, false),
    spec(TransformKind::Invert, "Invert", None, false),
    spec(TransformKind::Equalize, "Equalize", None, false),
];

/// The search space, in its fixed order.
pub fn registry() -> &'static [TransformSpec] {
    &REGISTRY
}

pub fn find(name: &str) -> Option<&'static TransformSpec> {
    REGISTRY.iter().find(|s| s.name == name)
}

/// Map a normalized magnitude onto the transform's native range.
pub fn scale_magnitude(spec: &TransformSpec, m01: f64) -> Result<f64> {
    let (lo, hi) = spec
        .native_range
        .ok_or_else(|| Error::Usage(format!("{} has no magnitude range", spec.name)))?;
    Ok(lo + m01 * (hi - lo))
}

/// Batch of `[C, H, W]` images stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub data: Vec<f64>,
    pub len: usize,
    pub dims: Dims,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn numel(self) -> usize {
        self.c * self.h * self.w
    }

    pub fn shape(self) -> [usize; 3] {
        [self.c, self.h, self.w]
    }

    fn plane(self) -> usize {
        self.h * self.w
    }
}

impl ImageBatch {
    pub fn new(dims: Dims) -> Self {
        Self { data: Vec::new(), len: 0, dims }
    }

    pub fn from_data(data: Vec<f64>, dims: Dims) -> Result<Self> {
        let per = dims.numel();
        if per == 0 || !data.len().is_multiple_of(per) {
            return Err(Error::ShapeMismatch { op: "image_batch", lhs: dims.shape().to_vec(), rhs: vec![data.len()] });
        }
        Ok(Self { len: data.len() / per, data, dims })
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.dims.numel();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn push(&mut self, image: &[f64]) -> Result<()> {
        if image.len() != self.dims.numel() {
            return Err(Error::ShapeMismatch {
                op: "image_batch",
                lhs: self.dims.shape().to_vec(),
                rhs: vec![image.len()],
            });
        }
        self.data.extend_from_slice(image);
        self.len += 1;
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn dims_of(tape: &Tape, x: DiffTensor) -> Result<Dims> {
    match *tape.shape(x) {
        [c, h, w] => Ok(Dims { c, h, w }),
        ref s => Err(Error::ShapeMismatch { op: "transform", lhs: s.to_vec(), rhs: vec![] }),
    }
}

fn native_of(spec: &TransformSpec, m01: f64) -> f64 {
    spec.native_range.map_or(0.0, |(lo, hi)| lo + m01 * (hi - lo))
}

/// Apply a transform to one image with a plain (non-recorded) magnitude in `(0, 1)`.
pub fn apply_value(spec: &TransformSpec, x: &[f64], dims: Dims, m01: f64) -> Result<Vec<f64>> {
    let out = forward(spec.kind, x, dims, native_of(spec, m01));
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: spec.name.to_string() });
    }
    Ok(out)
}

/// Record `spec` applied to `image` (`[C, H, W]`) with normalized magnitude
/// `m01` (a scalar) on the tape.
pub fn apply(tape: &mut Tape, spec: &TransformSpec, image: DiffTensor, m01: DiffTensor) -> Result<DiffTensor> {
    let dims = dims_of(tape, image)?;
    let native = native_of(spec, tape.scalar(m01));
    let out = forward(spec.kind, tape.value(image), dims, native);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: spec.name.to_string() });
    }
    let kind = spec.kind;
    match spec.native_range {
        Some((lo, hi)) if spec.magnitude_differentiable => {
            let width = hi - lo;
            tape.custom(
                spec.name,
                &[image, m01],
                &dims.shape(),
                out,
                Box::new(move |ctx| {
                    let (gx, gn) = backward(kind, ctx.inputs[0], ctx.output, dims, native, ctx.grad);
                    vec![ctx.needs[0].then_some(gx), ctx.needs[1].then(|| vec![gn * width])]
                }),
            )
        }
        Some(_) => {
            let y = tape.custom(
                spec.name,
                &[image],
                &dims.shape(),
                out,
                Box::new(move |ctx| {
                    let (gx, _) = backward(kind, ctx.inputs[0], ctx.output, dims, native, ctx.grad);
                    vec![Some(gx)]
                }),
            )?;
            // X + M - StopGrad(M): unit gradient per pixel into the magnitude.
            let frozen = tape.stop_grad(m01)?;
            let zero = tape.sub(m01, frozen)?;
            tape.add(y, zero)
        }
        None => tape.custom(
            spec.name,
            &[image],
            &dims.shape(),
            out,
            Box::new(move |ctx| {
                let (gx, _) = backward(kind, ctx.inputs[0], ctx.output, dims, native, ctx.grad);
                vec![Some(gx)]
            }),
        ),
    }
}

// ---------------------------------------------------------------------------
// kernels

const GRAY: [f64; 3] = [0.299, 0.587, 0.114];

fn gray_weight(c: usize, ch: usize) -> f64 {
    if c == 3 {
        GRAY[ch]
    } else {
        1.0 / c as f64
    }
}

fn grayscale(x: &[f64], d: Dims) -> Vec<f64> {
    let p = d.plane();
    let mut g = vec![0.0; p];
    for ch in 0..d.c {
        let w = gray_weight(d.c, ch);
        for (gi, xi) in g.iter_mut().zip(&x[ch * p..(ch + 1) * p]) {
            *gi += w * xi;
        }
    }
    g
}

/// Affine map from output pixel `(x, y)` to source coordinates
/// `(a0 x + a1 y + a2, a3 x + a4 y + a5)`, and its derivative in the native magnitude.
fn affine(kind: TransformKind, d: Dims, v: f64) -> ([f64; 6], [f64; 6]) {
    let cx = (d.w as f64 - 1.0) / 2.0;
    let cy = (d.h as f64 - 1.0) / 2.0;
    match kind {
        TransformKind::ShearX => ([1.0, v, -v * cy, 0.0, 1.0, 0.0], [0.0, 1.0, -cy, 0.0, 0.0, 0.0]),
        TransformKind::ShearY => ([1.0, 0.0, 0.0, v, 1.0, -v * cx], [0.0, 0.0, 0.0, 1.0, 0.0, -cx]),
        TransformKind::TranslateX => {
            let w = d.w as f64;
            ([1.0, 0.0, -v * w, 0.0, 1.0, 0.0], [0.0, 0.0, -w, 0.0, 0.0, 0.0])
        }
        TransformKind::TranslateY => {
            let h = d.h as f64;
            ([1.0, 0.0, 0.0, 0.0, 1.0, -v * h], [0.0, 0.0, 0.0, 0.0, 0.0, -h])
        }
        TransformKind::Rotate => {
            let r = v.to_radians();
            let (s, c) = r.sin_cos();
            let k = std::f64::consts::PI / 180.0;
            (
                [c, s, cx - c * cx - s * cy, -s, c, cy + s * cx - c * cy],
                [
                    -s * k,
                    c * k,
                    (s * cx - c * cy) * k,
                    -c * k,
                    -s * k,
                    (c * cx + s * cy) * k,
                ],
            )
        }
        _ => unreachable!("not a geometric transform"),
    }
}

pub fn is_geometric(kind: TransformKind) -> bool {
    matches!(
        kind,
        TransformKind::ShearX
            | TransformKind::ShearY
            | TransformKind::TranslateX
            | TransformKind::TranslateY
            | TransformKind::Rotate
    )
}

/// Bilinear taps for a source coordinate: `(x0, y0, fx, fy)`.
#[inline]
fn taps(xs: f64, ys: f64) -> (isize, isize, f64, f64) {
    let (fx0, fy0) = (xs.floor(), ys.floor());
    (fx0 as isize, fy0 as isize, xs - fx0, ys - fy0)
}

#[inline]
fn fetch(x: &[f64], d: Dims, ch: usize, yy: isize, xx: isize) -> f64 {
    if yy < 0 || xx < 0 || yy >= d.h as isize || xx >= d.w as isize {
        0.0
    } else {
        x[ch * d.plane() + yy as usize * d.w + xx as usize]
    }
}

fn warp_forward(x: &[f64], d: Dims, a: &[f64; 6]) -> Vec<f64> {
    let p = d.plane();
    let mut out = vec![0.0; x.len()];
    for yo in 0..d.h {
        for xo in 0..d.w {
            let (xf, yf) = (xo as f64, yo as f64);
            let xs = a[0] * xf + a[1] * yf + a[2];
            let ys = a[3] * xf + a[4] * yf + a[5];
            let (x0, y0, fx, fy) = taps(xs, ys);
            if x0 < -1 || y0 < -1 || x0 >= d.w as isize || y0 >= d.h as isize {
                continue;
            }
            let w00 = (1.0 - fx) * (1.0 - fy);
            let w01 = fx * (1.0 - fy);
            let w10 = (1.0 - fx) * fy;
            let w11 = fx * fy;
            for ch in 0..d.c {
                let v = w00 * fetch(x, d, ch, y0, x0)
                    + w01 * fetch(x, d, ch, y0, x0 + 1)
                    + w10 * fetch(x, d, ch, y0 + 1, x0)
                    + w11 * fetch(x, d, ch, y0 + 1, x0 + 1);
                out[ch * p + yo * d.w + xo] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn warp_backward(x: &[f64], d: Dims, a: &[f64; 6], g: &[f64]) -> (Vec<f64>, [f64; 6]) {
    let p = d.plane();
    let mut gx = vec![0.0; x.len()];
    let mut ga = [0.0; 6];
    let scatter = |gx: &mut [f64], ch: usize, yy: isize, xx: isize, v: f64| {
        if yy >= 0 && xx >= 0 && yy < d.h as isize && xx < d.w as isize {
            gx[ch * p + yy as usize * d.w + xx as usize] += v;
        }
    };
    for yo in 0..d.h {
        for xo in 0..d.w {
            let (xf, yf) = (xo as f64, yo as f64);
            let xs = a[0] * xf + a[1] * yf + a[2];
            let ys = a[3] * xf + a[4] * yf + a[5];
            let (x0, y0, fx, fy) = taps(xs, ys);
            if x0 < -1 || y0 < -1 || x0 >= d.w as isize || y0 >= d.h as isize {
                continue;
            }
            let (mut dxs, mut dys) = (0.0, 0.0);
            for ch in 0..d.c {
                let go = g[ch * p + yo * d.w + xo];
                if go == 0.0 {
                    continue;
                }
                let i00 = fetch(x, d, ch, y0, x0);
                let i01 = fetch(x, d, ch, y0, x0 + 1);
                let i10 = fetch(x, d, ch, y0 + 1, x0);
                let i11 = fetch(x, d, ch, y0 + 1, x0 + 1);
                dxs += go * ((1.0 - fy) * (i01 - i00) + fy * (i11 - i10));
                dys += go * ((1.0 - fx) * (i10 - i00) + fx * (i11 - i01));
                scatter(&mut gx, ch, y0, x0, go * (1.0 - fx) * (1.0 - fy));
                scatter(&mut gx, ch, y0, x0 + 1, go * fx * (1.0 - fy));
                scatter(&mut gx, ch, y0 + 1, x0, go * (1.0 - fx) * fy);
                scatter(&mut gx, ch, y0 + 1, x0 + 1, go * fx * fy);
            }
            ga[0] += dxs * xf;
            ga[1] += dxs * yf;
            ga[2] += dxs;
            ga[3] += dys * xf;
            ga[4] += dys * yf;
            ga[5] += dys;
        }
    }
    (gx, ga)
}

const SMOOTH: [[f64; 3]; 3] = [[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]];
const SMOOTH_NORM: f64 = 13.0;

/// 3x3 smoothing on interior pixels; the one-pixel border is left untouched.
fn smooth(x: &[f64], d: Dims) -> Vec<f64> {
    let mut out = x.to_vec();
    if d.h < 3 || d.w < 3 {
        return out;
    }
    let p = d.plane();
    for ch in 0..d.c {
        for y in 1..d.h - 1 {
            for xx in 1..d.w - 1 {
                let mut acc = 0.0;
                for (ky, row) in SMOOTH.iter().enumerate() {
                    for (kx, k) in row.iter().enumerate() {
                        acc += k * x[ch * p + (y + ky - 1) * d.w + xx + kx - 1];
                    }
                }
                out[ch * p + y * d.w + xx] = acc / SMOOTH_NORM;
            }
        }
    }
    out
}

/// Adjoint of [`smooth`].
fn smooth_adjoint(g: &[f64], d: Dims) -> Vec<f64> {
    let mut out = g.to_vec();
    if d.h < 3 || d.w < 3 {
        return out;
    }
    let p = d.plane();
    for ch in 0..d.c {
        for y in 1..d.h - 1 {
            for xx in 1..d.w - 1 {
                out[ch * p + y * d.w + xx] -= g[ch * p + y * d.w + xx];
            }
        }
        for y in 1..d.h - 1 {
            for xx in 1..d.w - 1 {
                let go = g[ch * p + y * d.w + xx] / SMOOTH_NORM;
                for (ky, row) in SMOOTH.iter().enumerate() {
                    for (kx, k) in row.iter().enumerate() {
                        out[ch * p + (y + ky - 1) * d.w + xx + kx - 1] += k * go;
                    }
                }
            }
        }
    }
    out
}

fn quantize(v: f64) -> usize {
    (v * 255.0).round().clamp(0.0, 255.0) as usize
}

fn posterize_bits(native: f64) -> u32 {
    native.round().clamp(1.0, 8.0) as u32
}

fn equalize_lut(levels: &[usize]) -> Option<[usize; 256]> {
    let mut hist = [0usize; 256];
    for &l in levels {
        hist[l] += 1;
    }
    let nonzero: Vec<usize> = hist.iter().copied().filter(|&h| h > 0).collect();
    if nonzero.len() <= 1 {
        return None;
    }
    let step = (nonzero.iter().sum::<usize>() - nonzero[nonzero.len() - 1]) / 255;
    if step == 0 {
        return None;
    }
    let mut lut = [0usize; 256];
    let mut n = step / 2;
    for (i, h) in hist.iter().enumerate() {
        lut[i] = (n / step).min(255);
        n += h;
    }
    Some(lut)
}

/// Value before the final clamp, for the pointwise/statistic transforms that
/// need it to mask the gradient.
fn pre_clamp(kind: TransformKind, x: &[f64], d: Dims, v: f64) -> Vec<f64> {
    match kind {
        TransformKind::Brightness => x.iter().map(|xi| xi + v).collect(),
        TransformKind::Contrast => {
            let mean = grayscale(x, d).iter().sum::<f64>() / d.plane() as f64;
            x.iter().map(|xi| mean + v * (xi - mean)).collect()
        }
        TransformKind::Color => {
            let gray = grayscale(x, d);
            let p = d.plane();
            x.iter()
                .enumerate()
                .map(|(i, xi)| {
                    let gi = gray[i % p];
                    gi + v * (xi - gi)
                })
                .collect()
        }
        TransformKind::Sharpness => {
            let blur = smooth(x, d);
            x.iter().zip(&blur).map(|(xi, bi)| bi + v * (xi - bi)).collect()
        }
        _ => unreachable!(),
    }
}

fn forward(kind: TransformKind, x: &[f64], d: Dims, v: f64) -> Vec<f64> {
    use TransformKind::*;
    match kind {
        ShearX | ShearY | TranslateX | TranslateY | Rotate => warp_forward(x, d, &affine(kind, d, v).0),
        Brightness | Contrast | Color | Sharpness => {
            pre_clamp(kind, x, d, v).into_iter().map(|y| y.clamp(0.0, 1.0)).collect()
        }
        Solarize => x.iter().map(|&xi| if xi < v { xi } else { 1.0 - xi }).collect(),
        Posterize => {
            let shift = 8 - posterize_bits(v);
            x.iter()
                .map(|&xi| (((quantize(xi) >> shift) << shift) as f64 / 255.0).clamp(0.0, 1.0))
                .collect()
        }
        Invert => x.iter().map(|xi| 1.0 - xi).collect(),
        AutoContrast => {
            let p = d.plane();
            let mut out = x.to_vec();
            for ch in 0..d.c {
                let plane = &x[ch * p..(ch + 1) * p];
                let (lo, hi) = min_max(plane);
                let r = plane[hi] - plane[lo];
                if r > 1e-12 {
                    for (o, xi) in out[ch * p..(ch + 1) * p].iter_mut().zip(plane) {
                        *o = ((xi - plane[lo]) / r).clamp(0.0, 1.0);
                    }
                }
            }
            out
        }
        Equalize => {
            let p = d.plane();
            let mut out = x.to_vec();
            for ch in 0..d.c {
                let levels: Vec<usize> = x[ch * p..(ch + 1) * p].iter().map(|&v| quantize(v)).collect();
                let dst = &mut out[ch * p..(ch + 1) * p];
                match equalize_lut(&levels) {
                    Some(lut) => {
                        for (o, l) in dst.iter_mut().zip(&levels) {
                            *o = lut[*l] as f64 / 255.0;
                        }
                    }
                    None => {
                        for (o, l) in dst.iter_mut().zip(&levels) {
                            *o = *l as f64 / 255.0;
                        }
                    }
                }
            }
            out
        }
    }
}

/// Index of the first minimum and first maximum.
fn min_max(v: &[f64]) -> (usize, usize) {
    let (mut lo, mut hi) = (0, 0);
    for (i, x) in v.iter().enumerate() {
        if *x < v[lo] {
            lo = i;
        }
        if *x > v[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

/// Gradient with respect to the input image and the native magnitude.
fn backward(kind: TransformKind, x: &[f64], out: &[f64], d: Dims, v: f64, g: &[f64]) -> (Vec<f64>, f64) {
    use TransformKind::*;
    let p = d.plane();
    match kind {
        ShearX | ShearY | TranslateX | TranslateY | Rotate => {
            let (a, da) = affine(kind, d, v);
            let (gx, ga) = warp_backward(x, d, &a, g);
            (gx, ga.iter().zip(&da).map(|(a, b)| a * b).sum())
        }
        Brightness | Contrast | Color | Sharpness => {
            let pre = pre_clamp(kind, x, d, v);
            let gm: Vec<f64> = g
                .iter()
                .zip(&pre)
                .map(|(gi, y)| if (0.0..=1.0).contains(y) { *gi } else { 0.0 })
                .collect();
            match kind {
                Brightness => {
                    let gv = gm.iter().sum();
                    (gm, gv)
                }
                Contrast => {
                    let mean = grayscale(x, d).iter().sum::<f64>() / p as f64;
                    let gv = gm.iter().zip(x).map(|(gi, xi)| gi * (xi - mean)).sum();
                    let total: f64 = gm.iter().sum();
                    let gx = gm
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| v * gi + (1.0 - v) * total * gray_weight(d.c, i / p) / p as f64)
                        .collect();
                    (gx, gv)
                }
                Color => {
                    let gray = grayscale(x, d);
                    let gv = gm.iter().zip(x).enumerate().map(|(i, (gi, xi))| gi * (xi - gray[i % p])).sum();
                    let mut per_pixel = vec![0.0; p];
                    for (i, gi) in gm.iter().enumerate() {
                        per_pixel[i % p] += gi;
                    }
                    let gx = gm
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| v * gi + (1.0 - v) * gray_weight(d.c, i / p) * per_pixel[i % p])
                        .collect();
                    (gx, gv)
                }
                Sharpness => {
                    let blur = smooth(x, d);
                    let gv = gm.iter().zip(x.iter().zip(&blur)).map(|(gi, (xi, bi))| gi * (xi - bi)).sum();
                    let back = smooth_adjoint(&gm, d);
                    let gx = gm.iter().zip(&back).map(|(gi, bi)| v * gi + (1.0 - v) * bi).collect();
                    (gx, gv)
                }
                _ => unreachable!(),
            }
        }
        Solarize => (
            x.iter().zip(g).map(|(&xi, gi)| if xi < v { *gi } else { -gi }).collect(),
            0.0,
        ),
        Posterize | Equalize => (g.to_vec(), 0.0),
        Invert => (g.iter().map(|gi| -gi).collect(), 0.0),
        AutoContrast => {
            let mut gx = g.to_vec();
            for ch in 0..d.c {
                let plane = &x[ch * p..(ch + 1) * p];
                let (lo, hi) = min_max(plane);
                let r = plane[hi] - plane[lo];
                if r <= 1e-12 {
                    continue;
                }
                let (mut glo, mut ghi) = (0.0, 0.0);
                for j in 0..p {
                    let gj = g[ch * p + j];
                    let o = out[ch * p + j];
                    gx[ch * p + j] = gj / r;
                    // d/dlo (x - lo)/r = (-1 + o)/r ; d/dhi = -o/r
                    glo += gj * (o - 1.0) / r;
                    ghi -= gj * o / r;
                }
                gx[ch * p + lo] += glo;
                gx[ch * p + hi] += ghi;
            }
            (gx, 0.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(d: Dims, seed: u64) -> Vec<f64> {
        let mut rng = crate::rng::stream(seed, "test-image", &[]);
        (0..d.numel()).map(|_| rng.random::<f64>()).collect()
    }

    #[test]
    fn registry_matches_search_space() {
        let r = registry();
        assert_eq!(r.len(), 14);
        assert_eq!(find("Rotate").unwrap().native_range, Some((-30.0, 30.0)));
        assert_eq!(find("Invert").unwrap().native_range, None);
        assert_eq!(find("AutoContrast").unwrap().native_range, None);
        assert_eq!(find("Equalize").unwrap().native_range, None);
    }

    #[test]
    fn magnitude_scaling() {
        assert_eq!(scale_magnitude(find("Rotate").unwrap(), 0.5).unwrap(), 0.0);
        assert_eq!(scale_magnitude(find("Posterize").unwrap(), 1.0).unwrap(), 8.0);
        assert_eq!(scale_magnitude(find("Brightness").unwrap(), 0.0).unwrap(), -0.4);
        assert!(matches!(scale_magnitude(find("Invert").unwrap(), 0.5), Err(Error::Usage(_))));
    }

    #[test]
    fn invert_is_one_minus_x() {
        let d = Dims::new(3, 4, 4);
        let x = random_image(d, 1);
        let y = apply_value(find("Invert").unwrap(), &x, d, 0.5).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert_eq!(*b, 1.0 - a);
        }
    }

    #[test]
    fn posterize_at_eight_bits_keeps_pixel_grid() {
        let d = Dims::new(1, 1, 256);
        let x: Vec<f64> = (0..256).map(|k| k as f64 / 255.0).collect();
        let y = apply_value(find("Posterize").unwrap(), &x, d, 1.0).unwrap();
        assert_eq!(x, y);
        let y2 = apply_value(find("Posterize").unwrap(), &x, d, 0.0).unwrap();
        // 2 bits: four levels
        let mut levels: Vec<u64> = y2.iter().map(|v| (v * 255.0).round() as u64).collect();
        levels.dedup();
        assert_eq!(levels, vec![0, 64, 128, 192]);
    }

    #[test]
    fn solarize_inverts_above_threshold() {
        let d = Dims::new(1, 1, 3);
        // m01 = 0.5 -> threshold 0.8
        let y = apply_value(find("Solarize").unwrap(), &[0.2, 0.79, 0.9], d, 0.5).unwrap();
        assert_eq!(y[0], 0.2);
        assert_eq!(y[1], 0.79);
        assert!((y[2] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn autocontrast_stretches_each_channel() {
        let d = Dims::new(1, 1, 3);
        let y = apply_value(find("AutoContrast").unwrap(), &[0.25, 0.5, 0.75], d, 0.5).unwrap();
        assert_eq!(y, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn equalize_flat_image_is_unchanged() {
        let d = Dims::new(1, 2, 2);
        let x = vec![100.0 / 255.0; 4];
        let y = apply_value(find("Equalize").unwrap(), &x, d, 0.5).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn smooth_adjoint_is_transpose() {
        let d = Dims::new(2, 5, 6);
        let x = random_image(d, 3);
        let g = random_image(d, 4);
        let lhs: f64 = smooth(&x, d).iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(smooth_adjoint(&g, d)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn solarize_magnitude_gradient_is_unit_per_pixel() {
        let d = Dims::new(3, 5, 7);
        let x = random_image(d, 9);
        let mut tape = Tape::new();
        let img = tape.leaf(x, &d.shape()).unwrap();
        let m = tape.scalar_leaf(0.3).unwrap();
        let y = apply(&mut tape, find("Solarize").unwrap(), img, m).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(m).unwrap()[0], d.numel() as f64);
    }

    #[test]
    fn nan_input_reports_transform_name() {
        let d = Dims::new(1, 1, 2);
        match apply_value(find("Invert").unwrap(), &[f64::NAN, 0.0], d, 0.5) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "Invert"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn geometric_set() {
        assert!(is_geometric(TransformKind::Rotate));
        assert!(!is_geometric(TransformKind::Invert));
    }
}
