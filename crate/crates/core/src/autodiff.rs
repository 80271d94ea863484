//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every primitive records its inputs on a [`Tape`] as it runs; a single call to
//! [`Tape::backward`] then sweeps the tape in reverse recording order and
//! accumulates gradients into every leaf that requires them.
//!
//! Gradient buffers are allocated lazily. A node whose gradient is never
//! touched is skipped entirely during the sweep, which is what keeps the
//! unselected branches of a hard mixture cheap.
//!
//! ```
//! use augsearch::autodiff::Tape;
//!
//! let mut tape = Tape::new();
//! let x = tape.scalar_leaf(3.0).unwrap();
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[6.0]);
//! ```

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DiffTensor(usize);

impl DiffTensor {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Inputs handed to a custom backward closure.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a [f64]>,
    pub output: &'a [f64],
    pub grad: &'a [f64],
    /// Which inputs actually need a gradient; closures may skip the others.
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Sin(usize),
    Cos(usize),
    Relu(usize),
    Silu(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    Sum(usize),
    Mean(usize),
    SumAxis { x: usize, axis: usize },
    Broadcast { x: usize, map: Vec<usize> },
    Reshape(usize),
    MatMul(usize, usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Slice { x: usize, axis: usize, start: usize },
    Element { x: usize, index: usize },
    Concat { parts: Vec<usize>, axis: usize },
    WeightedSum { weights: usize, items: Vec<usize> },
    StraightThrough { soft: usize },
    Conv2d { input: usize, weight: usize, bias: usize, stride: usize, padding: usize },
    Custom { parents: Vec<usize>, backward: BackwardFn },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: DiffTensor) -> Option<&[f64]> {
        self.grads.get(&t.0).map(Vec::as_slice)
    }

    /// Gradient of `t`, or zeros of length `len` when the leaf is unknown.
    pub fn get_or_zeros(&self, t: DiffTensor, len: usize) -> Vec<f64> {
        self.grads.get(&t.0).cloned().unwrap_or_else(|| vec![0.0; len])
    }
}

/// A recording of primitive operations. Topological order equals recording order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite(values: &[f64], op: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op: op.to_string() })
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let cols = *shape.last().unwrap();
            (numel(shape) / cols.max(1), cols)
        }
    }
}

/// Reduce an elementwise partial to the parent's extent (scalar broadcast).
fn reduce_to(partial: Vec<f64>, parent_len: usize) -> Vec<f64> {
    if parent_len == partial.len() {
        partial
    } else {
        vec![partial.iter().sum()]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, t: DiffTensor) -> &[f64] {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: DiffTensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    /// First element of `t`; meant for scalars.
    pub fn scalar(&self, t: DiffTensor) -> f64 {
        self.nodes[t.0].value[0]
    }

    pub fn requires_grad(&self, t: DiffTensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, t: DiffTensor) -> Option<&[f64]> {
        self.nodes[t.0].grad.as_deref()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> DiffTensor {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, grad: None, requires_grad, op });
        DiffTensor(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        value: Vec<f64>,
        parents: &[usize],
        op: Op,
    ) -> Result<DiffTensor> {
        check_finite(&value, name)?;
        let rg = parents.iter().any(|&p| self.nodes[p].requires_grad);
        Ok(self.push(shape, value, rg, op))
    }

    fn input(&mut self, value: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<DiffTensor> {
        if numel(shape) != value.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                lhs: shape.to_vec(),
                rhs: vec![value.len()],
            });
        }
        check_finite(&value, "leaf")?;
        let op = if requires_grad { Op::Leaf } else { Op::Constant };
        Ok(self.push(shape.to_vec(), value, requires_grad, op))
    }

    /// A tensor that receives a gradient in [`Tape::backward`].
    pub fn leaf(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<DiffTensor> {
        self.input(value, shape, true)
    }

    pub fn constant(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<DiffTensor> {
        self.input(value, shape, false)
    }

    pub fn scalar_leaf(&mut self, v: f64) -> Result<DiffTensor> {
        self.leaf(vec![v], &[])
    }

    pub fn scalar_constant(&mut self, v: f64) -> Result<DiffTensor> {
        self.constant(vec![v], &[])
    }

    // --- elementwise binary ops (identical shapes, or one single-element operand) ---

    fn binary(
        &mut self,
        name: &'static str,
        a: DiffTensor,
        b: DiffTensor,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<DiffTensor> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let (na, nb) = (numel(sa), numel(sb));
        let shape = if sa == sb {
            sa.clone()
        } else if na == 1 {
            sb.clone()
        } else if nb == 1 {
            sa.clone()
        } else {
            return Err(Error::ShapeMismatch { op: name, lhs: sa.clone(), rhs: sb.clone() });
        };
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let n = numel(&shape);
        let value: Vec<f64> = if na == n && nb == n {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else if na == n {
            va.iter().map(|&x| f(x, vb[0])).collect()
        } else {
            vb.iter().map(|&y| f(va[0], y)).collect()
        };
        self.push_checked(name, shape, value, &[a.0, b.0], op)
    }

    pub fn add(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    // --- unary ops ---

    fn unary(&mut self, name: &'static str, x: DiffTensor, f: impl Fn(f64) -> f64, op: Op) -> Result<DiffTensor> {
        let shape = self.nodes[x.0].shape.clone();
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| f(v)).collect();
        self.push_checked(name, shape, value, &[x.0], op)
    }

    pub fn neg(&mut self, x: DiffTensor) -> Result<DiffTensor> {
        self.unary("neg", x, |v| -v, Op::Neg(x.0))
    }

    /// `c * x` for a constant `c`.
    pub fn scale(&mut self, x: DiffTensor, c: f64) -> Result<DiffTensor> {
        self.unary("scale", x, |v| c * v, Op::Scale(x.0, c))
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: DiffTensor, c: f64) -> Result<DiffTensor> {
        self.unary("offset", x, |v| v + c, Op::Offset(x.0))
    }

    pub fn exp(&mut self, x: DiffTensor) -> Result<DiffTensor> {
        self.unary("exp", x, f64::exp, Op::Exp(x.0))
    }

    pub fn log(&mut self, x: DiffTensor) -> Result<DiffTensor> {
        self.unary("log", x, f64::ln, Op::Log(x.0))
    }

    pub fn sigmoid(&mut self, x: DiffTensor) -> Result<DiffTensor> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x.0))
    }

    pub fn sin(&mut self, x: DiffTensor) -> Result<DiffTensor> {
        self.unary("sin", x, f64::sin, Op::Sin(x.0))
    }

    pub fn cos(&mut self, x: DiffTensor) -> Result<DiffTensor> {
        self.unary("cos", x, f64::cos, Op::Cos(x.0))
    }

    pub fn relu(&mut self, x: DiffTensor) -> Result<DiffTensor> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x.0))
    }

    /// `x * sigmoid(x)`, a smooth stand-in for `relu`.
    pub fn silu(&mut self, x: DiffTensor) -> Result<DiffTensor> {
        self.unary("silu", x, |v| v * sigmoid(v), Op::Silu(x.0))
    }

    /// Clamp into `[lo, hi]`. The gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: DiffTensor, lo: f64, hi: f64) -> Result<DiffTensor> {
        if lo > hi {
            return Err(Error::Parameter(format!("clamp bounds reversed: {lo} > {hi}")));
        }
        self.unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp { x: x.0, lo, hi })
    }

    // --- reductions and shape manipulation ---

    pub fn sum(&mut self, x: DiffTensor) -> Result<DiffTensor> {
        let s = self.nodes[x.0].value.iter().sum();
        self.push_checked("sum", vec![], vec![s], &[x.0], Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: DiffTensor) -> Result<DiffTensor> {
        let v = &self.nodes[x.0].value;
        if v.is_empty() {
            return Err(Error::Usage("mean of an empty tensor".into()));
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push_checked("mean", vec![], vec![m], &[x.0], Op::Mean(x.0))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: DiffTensor, axis: usize) -> Result<DiffTensor> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::ShapeMismatch { op: "sum_axis", lhs: shape, rhs: vec![axis] });
        }
        let (outer, len, inner) = outer_inner(&shape, axis);
        let v = &self.nodes[x.0].value;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += v[base + i];
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        self.push_checked("sum_axis", oshape, out, &[x.0], Op::SumAxis { x: x.0, axis })
    }

    /// Numpy-style broadcast: trailing dimensions aligned, extent-1 dims expand.
    pub fn broadcast_to(&mut self, x: DiffTensor, shape: &[usize]) -> Result<DiffTensor> {
        let src = self.nodes[x.0].shape.clone();
        let mismatch = || Error::ShapeMismatch { op: "broadcast_to", lhs: src.clone(), rhs: shape.to_vec() };
        if src.len() > shape.len() {
            return Err(mismatch());
        }
        let pad = shape.len() - src.len();
        let mut padded = vec![1; pad];
        padded.extend_from_slice(&src);
        for (s, t) in padded.iter().zip(shape) {
            if *s != *t && *s != 1 {
                return Err(mismatch());
            }
        }
        let mut src_strides = vec![0usize; shape.len()];
        let mut acc = 1;
        for d in (0..shape.len()).rev() {
            src_strides[d] = if padded[d] == 1 { 0 } else { acc };
            acc *= padded[d];
        }
        let n = numel(shape);
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            map.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let v = &self.nodes[x.0].value;
        let value = map.iter().map(|&m| v[m]).collect();
        self.push_checked("broadcast_to", shape.to_vec(), value, &[x.0], Op::Broadcast { x: x.0, map })
    }

    pub fn reshape(&mut self, x: DiffTensor, shape: &[usize]) -> Result<DiffTensor> {
        let src = &self.nodes[x.0].shape;
        if numel(src) != numel(shape) {
            return Err(Error::ShapeMismatch { op: "reshape", lhs: src.clone(), rhs: shape.to_vec() });
        }
        let value = self.nodes[x.0].value.clone();
        Ok(self.push(shape.to_vec(), value, self.nodes[x.0].requires_grad, Op::Reshape(x.0)))
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        let (sa, sb) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = matmul_raw(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n);
        self.push_checked("matmul", vec![m, n], value, &[a.0, b.0], Op::MatMul(a.0, b.0))
    }

    /// Softmax over the last axis (a 1-D tensor is a single row).
    pub fn softmax_rows(&mut self, x: DiffTensor) -> Result<DiffTensor> {
        let shape = self.nodes[x.0].shape.clone();
        let (rows, cols) = rows_cols(&shape);
        let v = &self.nodes[x.0].value;
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (x - max).exp();
                z += *o;
            }
            out[r * cols..(r + 1) * cols].iter_mut().for_each(|o| *o /= z);
        }
        self.push_checked("softmax_rows", shape, out, &[x.0], Op::SoftmaxRows(x.0))
    }

    pub fn log_softmax_rows(&mut self, x: DiffTensor) -> Result<DiffTensor> {
        let shape = self.nodes[x.0].shape.clone();
        let (rows, cols) = rows_cols(&shape);
        let v = &self.nodes[x.0].value;
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        self.push_checked("log_softmax_rows", shape, out, &[x.0], Op::LogSoftmaxRows(x.0))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: DiffTensor, axis: usize, start: usize, len: usize) -> Result<DiffTensor> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::ShapeMismatch { op: "slice", lhs: shape, rhs: vec![axis, start, len] });
        }
        let (outer, full, inner) = outer_inner(&shape, axis);
        let v = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        self.push_checked("slice", oshape, out, &[x.0], Op::Slice { x: x.0, axis, start })
    }

    /// Single entry at row-major `index`, as a scalar.
    pub fn element(&mut self, x: DiffTensor, index: usize) -> Result<DiffTensor> {
        let v = &self.nodes[x.0].value;
        if index >= v.len() {
            return Err(Error::ShapeMismatch { op: "element", lhs: self.nodes[x.0].shape.clone(), rhs: vec![index] });
        }
        let value = vec![v[index]];
        self.push_checked("element", vec![], value, &[x.0], Op::Element { x: x.0, index })
    }

    pub fn concat(&mut self, parts: &[DiffTensor], axis: usize) -> Result<DiffTensor> {
        let first = parts.first().ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let base = self.nodes[first.0].shape.clone();
        if axis >= base.len() {
            return Err(Error::ShapeMismatch { op: "concat", lhs: base, rhs: vec![axis] });
        }
        let mut total = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            let same = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !same {
                return Err(Error::ShapeMismatch { op: "concat", lhs: base, rhs: s.clone() });
            }
            total += s[axis];
        }
        let (outer, _, inner) = outer_inner(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.nodes[p.0].shape[axis];
                let v = &self.nodes[p.0].value;
                out.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut oshape = base;
        oshape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push_checked("concat", oshape, out, &ids, Op::Concat { parts: ids.clone(), axis })
    }

    /// `sum_i weights[i] * items[i]` over same-shaped items.
    pub fn weighted_sum(&mut self, weights: DiffTensor, items: &[DiffTensor]) -> Result<DiffTensor> {
        let w = &self.nodes[weights.0].value;
        if w.len() != items.len() || items.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                lhs: self.nodes[weights.0].shape.clone(),
                rhs: vec![items.len()],
            });
        }
        let shape = self.nodes[items[0].0].shape.clone();
        let mut out = vec![0.0; numel(&shape)];
        for (wi, item) in w.iter().zip(items) {
            let node = &self.nodes[item.0];
            if node.shape != shape {
                return Err(Error::ShapeMismatch { op: "weighted_sum", lhs: shape, rhs: node.shape.clone() });
            }
            if *wi != 0.0 {
                for (o, v) in out.iter_mut().zip(&node.value) {
                    *o += wi * v;
                }
            }
        }
        let mut ids = vec![weights.0];
        ids.extend(items.iter().map(|i| i.0));
        let op = Op::WeightedSum { weights: weights.0, items: items.iter().map(|i| i.0).collect() };
        self.push_checked("weighted_sum", shape, out, &ids, op)
    }

    /// Forward identity, backward annihilator.
    pub fn stop_grad(&mut self, x: DiffTensor) -> Result<DiffTensor> {
        let node = &self.nodes[x.0];
        let (shape, value) = (node.shape.clone(), node.value.clone());
        Ok(self.push(shape, value, false, Op::Constant))
    }

    /// Forward value of `hard` (bit-for-bit); gradient flows entirely into `soft`.
    pub fn straight_through(&mut self, hard: DiffTensor, soft: DiffTensor) -> Result<DiffTensor> {
        let (sh, ss) = (&self.nodes[hard.0].shape, &self.nodes[soft.0].shape);
        if sh != ss {
            return Err(Error::ShapeMismatch { op: "straight_through", lhs: sh.clone(), rhs: ss.clone() });
        }
        let (shape, value) = (sh.clone(), self.nodes[hard.0].value.clone());
        self.push_checked("straight_through", shape, value, &[soft.0], Op::StraightThrough { soft: soft.0 })
    }

    /// 2-D convolution of a single `[C, H, W]` input with `[O, C, KH, KW]` weights.
    pub fn conv2d(
        &mut self,
        input: DiffTensor,
        weight: DiffTensor,
        bias: DiffTensor,
        stride: usize,
        padding: usize,
    ) -> Result<DiffTensor> {
        let (si, sw, sb) = (
            self.nodes[input.0].shape.clone(),
            self.nodes[weight.0].shape.clone(),
            self.nodes[bias.0].shape.clone(),
        );
        if si.len() != 3 || sw.len() != 4 || sw[1] != si[0] || numel(&sb) != sw[0] || stride == 0 {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: si, rhs: sw });
        }
        let geom = ConvGeom::new(&si, &sw, stride, padding)?;
        let value = geom.forward(&self.nodes[input.0].value, &self.nodes[weight.0].value, &self.nodes[bias.0].value);
        let op = Op::Conv2d { input: input.0, weight: weight.0, bias: bias.0, stride, padding };
        self.push_checked("conv2d", vec![geom.o, geom.ho, geom.wo], value, &[input.0, weight.0, bias.0], op)
    }

    /// Record an operation whose forward value was computed by the caller.
    /// `backward` returns one optional gradient per parent.
    pub fn custom(
        &mut self,
        name: &str,
        parents: &[DiffTensor],
        shape: &[usize],
        value: Vec<f64>,
        backward: BackwardFn,
    ) -> Result<DiffTensor> {
        if numel(shape) != value.len() {
            return Err(Error::ShapeMismatch { op: "custom", lhs: shape.to_vec(), rhs: vec![value.len()] });
        }
        let ids: Vec<usize> = parents.iter().map(|p| p.0).collect();
        self.push_checked(name, shape.to_vec(), value, &ids, Op::Custom { parents: ids.clone(), backward })
    }

    // --- backward ---

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: DiffTensor) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let n = numel(&self.nodes[loss.0].shape);
        if n != 1 {
            return Err(Error::NotScalar(self.nodes[loss.0].shape.clone()));
        }
        self.consumed = true;
        if self.nodes[loss.0].requires_grad {
            self.nodes[loss.0].grad = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || matches!(self.nodes[id].op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else { continue };
            for (pid, contrib) in self.node_backward(id, &g) {
                let parent = &mut self.nodes[pid];
                match &mut parent.grad {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    None => parent.grad = Some(contrib),
                }
            }
        }
        let mut grads = HashMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                let g = node.grad.clone().unwrap_or_else(|| vec![0.0; node.value.len()]);
                grads.insert(id, g);
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn node_backward(&self, id: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[id];
        let val = |p: usize| self.nodes[p].value.as_slice();
        let mut out = Vec::new();
        let mut emit = |p: usize, v: Vec<f64>| {
            if self.needs(p) {
                out.push((p, v));
            }
        };
        // Elementwise partial with scalar broadcast of either operand.
        let at = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    emit(*a, reduce_to(g.to_vec(), val(*a).len()));
                }
                if self.needs(*b) {
                    emit(*b, reduce_to(g.to_vec(), val(*b).len()));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    emit(*a, reduce_to(g.to_vec(), val(*a).len()));
                }
                if self.needs(*b) {
                    emit(*b, reduce_to(g.iter().map(|x| -x).collect(), val(*b).len()));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.needs(*a) {
                    let p = g.iter().enumerate().map(|(i, gi)| gi * at(vb, i)).collect();
                    emit(*a, reduce_to(p, va.len()));
                }
                if self.needs(*b) {
                    let p = g.iter().enumerate().map(|(i, gi)| gi * at(va, i)).collect();
                    emit(*b, reduce_to(p, vb.len()));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.needs(*a) {
                    let p = g.iter().enumerate().map(|(i, gi)| gi / at(vb, i)).collect();
                    emit(*a, reduce_to(p, va.len()));
                }
                if self.needs(*b) {
                    let p = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| {
                            let y = at(vb, i);
                            -gi * at(va, i) / (y * y)
                        })
                        .collect();
                    emit(*b, reduce_to(p, vb.len()));
                }
            }
            Op::Neg(x) => emit(*x, g.iter().map(|v| -v).collect()),
            Op::Scale(x, c) => emit(*x, g.iter().map(|v| c * v).collect()),
            Op::Offset(x) | Op::Reshape(x) => emit(*x, g.to_vec()),
            Op::Exp(x) => emit(*x, g.iter().zip(&node.value).map(|(gi, y)| gi * y).collect()),
            Op::Log(x) => emit(*x, g.iter().zip(val(*x)).map(|(gi, v)| gi / v).collect()),
            Op::Sigmoid(x) => emit(*x, g.iter().zip(&node.value).map(|(gi, y)| gi * y * (1.0 - y)).collect()),
            Op::Sin(x) => emit(*x, g.iter().zip(val(*x)).map(|(gi, v)| gi * v.cos()).collect()),
            Op::Cos(x) => emit(*x, g.iter().zip(val(*x)).map(|(gi, v)| -gi * v.sin()).collect()),
            Op::Relu(x) => emit(*x, g.iter().zip(val(*x)).map(|(gi, v)| if *v > 0.0 { *gi } else { 0.0 }).collect()),
            Op::Silu(x) => emit(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(gi, v)| {
                        let s = sigmoid(*v);
                        gi * s * (1.0 + v * (1.0 - s))
                    })
                    .collect(),
            ),
            Op::Clamp { x, lo, hi } => emit(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(gi, v)| if *v >= *lo && *v <= *hi { *gi } else { 0.0 })
                    .collect(),
            ),
            Op::Sum(x) => emit(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                emit(*x, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis { x, axis } => {
                let shape = &self.nodes[*x].shape;
                let (outer, len, inner) = outer_inner(shape, *axis);
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                emit(*x, gx);
            }
            Op::Broadcast { x, map } => {
                let mut gx = vec![0.0; val(*x).len()];
                for (gi, &m) in g.iter().zip(map) {
                    gx[m] += gi;
                }
                emit(*x, gx);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[*a].shape, &self.nodes[*b].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    // g [m,n] * b^T [n,k]
                    let vb = val(*b);
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij != 0.0 {
                                for l in 0..k {
                                    ga[i * k + l] += gij * vb[l * n + j];
                                }
                            }
                        }
                    }
                    emit(*a, ga);
                }
                if self.needs(*b) {
                    // a^T [k,m] * g [m,n]
                    let va = val(*a);
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for l in 0..k {
                            let ail = va[i * k + l];
                            for j in 0..n {
                                gb[l * n + j] += ail * g[i * n + j];
                            }
                        }
                    }
                    emit(*b, gb);
                }
            }
            Op::SoftmaxRows(x) => {
                let (rows, cols) = rows_cols(&node.shape);
                let y = &node.value;
                let mut gx = vec![0.0; y.len()];
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                    for i in s {
                        gx[i] = y[i] * (g[i] - dot);
                    }
                }
                emit(*x, gx);
            }
            Op::LogSoftmaxRows(x) => {
                let (rows, cols) = rows_cols(&node.shape);
                let y = &node.value;
                let mut gx = vec![0.0; y.len()];
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let total: f64 = g[s.clone()].iter().sum();
                    for i in s {
                        gx[i] = g[i] - y[i].exp() * total;
                    }
                }
                emit(*x, gx);
            }
            Op::Slice { x, axis, start } => {
                let shape = &self.nodes[*x].shape;
                let (outer, full, inner) = outer_inner(shape, *axis);
                let len = node.shape[*axis];
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                emit(*x, gx);
            }
            Op::Element { x, index } => {
                let mut gx = vec![0.0; val(*x).len()];
                gx[*index] = g[0];
                emit(*x, gx);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = outer_inner(&node.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].shape[*axis];
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        emit(p, gp);
                    }
                    offset += len;
                }
            }
            Op::WeightedSum { weights, items } => {
                let w = val(*weights);
                if self.needs(*weights) {
                    let gw = items
                        .iter()
                        .map(|&it| val(it).iter().zip(g).map(|(a, b)| a * b).sum())
                        .collect();
                    emit(*weights, gw);
                }
                for (&it, &wi) in items.iter().zip(w) {
                    // A zero weight contributes exactly nothing; skipping keeps
                    // the item's subgraph untouched by the sweep.
                    if wi != 0.0 && self.needs(it) {
                        emit(it, g.iter().map(|v| wi * v).collect());
                    }
                }
            }
            Op::StraightThrough { soft } => emit(*soft, g.to_vec()),
            Op::Conv2d { input, weight, bias, stride, padding } => {
                let si = &self.nodes[*input].shape;
                let sw = &self.nodes[*weight].shape;
                let geom = ConvGeom::new(si, sw, *stride, *padding).expect("validated in forward");
                let (gi, gw, gb) = geom.backward(
                    val(*input),
                    val(*weight),
                    g,
                    self.needs(*input),
                    self.needs(*weight),
                );
                if let Some(gi) = gi {
                    emit(*input, gi);
                }
                if let Some(gw) = gw {
                    emit(*weight, gw);
                }
                if self.needs(*bias) {
                    emit(*bias, gb);
                }
            }
            Op::Custom { parents, backward } => {
                let ctx = BackwardCtx {
                    inputs: parents.iter().map(|&p| val(p)).collect(),
                    output: &node.value,
                    grad: g,
                    needs: parents.iter().map(|&p| self.needs(p)).collect(),
                };
                for (&p, gp) in parents.iter().zip(backward(&ctx)) {
                    if let Some(gp) = gp {
                        emit(p, gp);
                    }
                }
            }
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let ail = a[i * k + l];
            if ail == 0.0 {
                continue;
            }
            let row = &b[l * n..(l + 1) * n];
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o += ail * bv;
            }
        }
    }
    out
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn new(si: &[usize], sw: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (c, h, w) = (si[0], si[1], si[2]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: si.to_vec(), rhs: sw.to_vec() });
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        Ok(Self { c, h, w, o, kh, kw, ho, wo, stride, padding })
    }

    /// Input coordinate for output position `out` and kernel tap `k`, if inside.
    #[inline]
    fn src(&self, out: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Patch matrix `[C * KH * KW, HO * WO]`, zero where the tap falls in the padding.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let p = self.ho * self.wo;
        let mut cols = vec![0.0; self.c * self.kh * self.kw * p];
        for ic in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &mut cols[((ic * self.kh + ky) * self.kw + kx) * p..][..p];
                    for oy in 0..self.ho {
                        let Some(iy) = self.src(oy, ky, self.h) else { continue };
                        for ox in 0..self.wo {
                            if let Some(ix) = self.src(ox, kx, self.w) {
                                row[oy * self.wo + ox] = x[(ic * self.h + iy) * self.w + ix];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let p = self.ho * self.wo;
        let mut x = vec![0.0; self.c * self.h * self.w];
        for ic in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &cols[((ic * self.kh + ky) * self.kw + kx) * p..][..p];
                    for oy in 0..self.ho {
                        let Some(iy) = self.src(oy, ky, self.h) else { continue };
                        for ox in 0..self.wo {
                            if let Some(ix) = self.src(ox, kx, self.w) {
                                x[(ic * self.h + iy) * self.w + ix] += row[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    fn forward(&self, x: &[f64], wt: &[f64], b: &[f64]) -> Vec<f64> {
        let p = self.ho * self.wo;
        let taps = self.c * self.kh * self.kw;
        let cols = self.im2col(x);
        let mut out = vec![0.0; self.o * p];
        for oc in 0..self.o {
            let dst = &mut out[oc * p..(oc + 1) * p];
            dst.fill(b[oc]);
            for j in 0..taps {
                let w = wt[oc * taps + j];
                for (d, c) in dst.iter_mut().zip(&cols[j * p..(j + 1) * p]) {
                    *d += w * c;
                }
            }
        }
        out
    }

    fn backward(
        &self,
        x: &[f64],
        wt: &[f64],
        g: &[f64],
        need_x: bool,
        need_w: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
        let p = self.ho * self.wo;
        let taps = self.c * self.kh * self.kw;
        let gb = (0..self.o).map(|oc| g[oc * p..(oc + 1) * p].iter().sum()).collect();
        let gw = need_w.then(|| {
            let cols = self.im2col(x);
            let mut gw = vec![0.0; wt.len()];
            for oc in 0..self.o {
                let go = &g[oc * p..(oc + 1) * p];
                for j in 0..taps {
                    gw[oc * taps + j] = go.iter().zip(&cols[j * p..(j + 1) * p]).map(|(a, b)| a * b).sum();
                }
            }
            gw
        });
        let gx = need_x.then(|| {
            let mut gcols = vec![0.0; taps * p];
            for oc in 0..self.o {
                let go = &g[oc * p..(oc + 1) * p];
                for j in 0..taps {
                    let w = wt[oc * taps + j];
                    for (d, gi) in gcols[j * p..(j + 1) * p].iter_mut().zip(go) {
                        *d += w * gi;
                    }
                }
            }
            self.col2im(&gcols)
        });
        (gx, gw, gb)
    }
}
