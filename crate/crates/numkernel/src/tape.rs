//! Wengert-list tape for reverse-mode differentiation.
//!
//! Every op appends one node holding its output value and enough saved state
//! to run its backward rule. [`Tape::backward`] walks the list in reverse,
//! so each recorded op is visited exactly once per call. Leaf gradients
//! accumulate across calls until [`Tape::zero_grad`].

use crate::conv::{self, ConvDims};
use crate::error::{mismatch, KernelError, Result};
use crate::tensor::{broadcast_index, broadcast_shape, numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-supplied backward rule for ops whose gradient is not the derivative
/// of their forward pass (e.g. heuristic or straight-through estimators).
pub trait CustomBackward: Send + Sync {
    /// Gradient contribution for each input, or `None` to pass nothing.
    fn backward(&self, grad_out: &[f64], inputs: &[&Tensor], output: &Tensor) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Sqrt(Var),
    Powf(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SumAll(Var),
    SumAxis { a: Var, axis: usize },
    MaxAxis { a: Var, argmax: Vec<usize> },
    Softmax { a: Var, axis: usize },
    LogSoftmax { a: Var, axis: usize },
    LayerNorm { a: Var, inv_std: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize },
    IndexSelect { a: Var, rows: Vec<usize> },
    ScatterAddRows { a: Var, targets: Vec<Option<usize>> },
    Conv2d { x: Var, w: Var },
    DwConv2d { x: Var, w: Var },
    AdaptiveAvgPool { x: Var },
    L1Norm(Var),
    L2Norm(Var),
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomBackward> },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

/// `(outer, n, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn add_into_owned(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

/// Sum a broadcast gradient back to the operand's shape.
fn unbroadcast(g: &[f64], src_shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if src_shape == out_shape {
        return g.to_vec();
    }
    let idx = broadcast_index(src_shape, out_shape);
    let mut out = vec![0.0; numel(src_shape)];
    for (gi, &k) in g.iter().zip(&idx) {
        out[k] += gi;
    }
    out
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf; zeros when it never received one.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match &self.leaf_grads[v.0] {
            Some(g) => Tensor::new(&shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Copy of `a` cut off from the graph.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| mismatch(name, &[ta.shape(), tb.shape()]))?;
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index(ta.shape(), &shape);
            let ib = broadcast_index(tb.shape(), &shape);
            ia.iter().zip(&ib).map(|(&i, &j)| f(ta.data()[i], tb.data()[j])).collect()
        };
        Ok((Tensor::new(&shape, data)?, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| c * x);
        let rg = self.rg(a);
        self.push(t, rg, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(t, rg, Op::AddScalar(a))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(t, rg, op)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |x| x.powf(p), Op::Powf(a, p))
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for (kk, &av) in da[i * k..(i + 1) * k].iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                for (o, &bv) in row.iter_mut().zip(&db[kk * n..(kk + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, rg, Op::MatMul(a, b)))
    }

    /// 2D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.ndim() != 2 {
            return Err(mismatch("transpose", &[ta.shape()]));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ta.data()[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[n, m], out)?, rg, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, rg, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        if axis >= self.value(a).ndim() {
            return Err(KernelError::InvalidArgument {
                op,
                msg: format!("axis {axis} out of range for shape {:?}", self.shape(a)),
            });
        }
        Ok(())
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", a, axis)?;
        let ta = self.value(a);
        let (outer, n, inner) = split_axis(ta.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &ta.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = ta.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, out)?, rg, Op::SumAxis { a, axis }))
    }

    /// Max along `axis`, removing it. Ties resolve to the first index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("max_axis", a, axis)?;
        let ta = self.value(a);
        let (outer, n, inner) = split_axis(ta.shape(), axis);
        if n == 0 {
            return Err(KernelError::InvalidArgument { op: "max_axis", msg: "empty axis".into() });
        }
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    let v = ta.data()[(o * n + j) * inner + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        arg[o * inner + i] = (o * n + j) * inner + i;
                    }
                }
            }
        }
        let mut shape = ta.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, out)?, rg, Op::MaxAxis { a, argmax: arg }))
    }

    fn softmax_values(t: &Tensor, axis: usize, log: bool) -> Vec<f64> {
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; t.len()];
        let d = t.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..n).map(|j| (d[at(j)] - m).exp()).sum();
                if log {
                    let lz = z.ln();
                    for j in 0..n {
                        out[at(j)] = d[at(j)] - m - lz;
                    }
                } else {
                    for j in 0..n {
                        out[at(j)] = (d[at(j)] - m).exp() / z;
                    }
                }
            }
        }
        out
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let ta = self.value(a);
        let t = Tensor::new(ta.shape(), Self::softmax_values(ta, axis, false))?;
        let rg = self.rg(a);
        Ok(self.push(t, rg, Op::Softmax { a, axis }))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", a, axis)?;
        let ta = self.value(a);
        let t = Tensor::new(ta.shape(), Self::softmax_values(ta, axis, true))?;
        let rg = self.rg(a);
        Ok(self.push(t, rg, Op::LogSoftmax { a, axis }))
    }

    /// Normalizes over the last axis: `(x - mean) / sqrt(var + eps)`, no
    /// affine. Zero-variance rows map to zeros.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let ta = self.value(a);
        if ta.ndim() == 0 {
            return Err(mismatch("layer_norm", &[ta.shape()]));
        }
        let n = *ta.shape().last().unwrap();
        let rows = ta.len() / n.max(1);
        let mut out = vec![0.0; ta.len()];
        let mut inv = vec![0.0; rows];
        for r in 0..rows {
            let x = &ta.data()[r * n..(r + 1) * n];
            let mean = x.iter().sum::<f64>() / n as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv[r] = is;
            for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(x) {
                *o = (v - mean) * is;
            }
        }
        let t = Tensor::new(ta.shape(), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, rg, Op::LayerNorm { a, inv_std: inv }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(KernelError::InvalidArgument { op: "concat", msg: "no inputs".into() })?;
        self.check_axis("concat", *first, axis)?;
        let base = self.shape(*first).to_vec();
        for p in parts {
            let s = self.shape(*p);
            let ok = s.len() == base.len() && s.iter().enumerate().all(|(i, &d)| i == axis || d == base[i]);
            if !ok {
                let shapes: Vec<&[usize]> = parts.iter().map(|p| self.shape(*p)).collect();
                return Err(mismatch("concat", &shapes));
            }
        }
        let total: usize = parts.iter().map(|p| self.shape(*p)[axis]).sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor::new(&shape, out)?, rg, Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("narrow", a, axis)?;
        let ta = self.value(a);
        let (outer, n, inner) = split_axis(ta.shape(), axis);
        if start + len > n {
            return Err(KernelError::InvalidArgument {
                op: "narrow",
                msg: format!("range {start}..{} exceeds axis size {n}", start + len),
            });
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&ta.data()[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = ta.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, out)?, rg, Op::Narrow { a, axis, start }))
    }

    /// Gather rows (first axis) by index; indices may repeat.
    pub fn index_select(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if ta.ndim() == 0 {
            return Err(mismatch("index_select", &[ta.shape()]));
        }
        let n = ta.shape()[0];
        let row = ta.len() / n.max(1);
        let mut out = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            if r >= n {
                return Err(KernelError::InvalidArgument { op: "index_select", msg: format!("row {r} >= {n}") });
            }
            out.extend_from_slice(&ta.data()[r * row..(r + 1) * row]);
        }
        let mut shape = ta.shape().to_vec();
        shape[0] = rows.len();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, out)?, rg, Op::IndexSelect { a, rows: rows.to_vec() }))
    }

    /// Adds row `i` of `a: [n, d]` into row `targets[i]` of a zero
    /// `[out_rows, d]` tensor; `None` targets are skipped.
    pub fn scatter_add_rows(&mut self, a: Var, targets: &[Option<usize>], out_rows: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.ndim() != 2 || ta.shape()[0] != targets.len() {
            return Err(mismatch("scatter_add_rows", &[ta.shape(), &[targets.len()]]));
        }
        let d = ta.shape()[1];
        let mut out = vec![0.0; out_rows * d];
        for (i, t) in targets.iter().enumerate() {
            if let Some(r) = *t {
                if r >= out_rows {
                    return Err(KernelError::InvalidArgument {
                        op: "scatter_add_rows",
                        msg: format!("target row {r} >= {out_rows}"),
                    });
                }
                for (o, s) in out[r * d..(r + 1) * d].iter_mut().zip(&ta.data()[i * d..(i + 1) * d]) {
                    *o += s;
                }
            }
        }
        let rg = self.rg(a);
        let t = Tensor::new(&[out_rows, d], out)?;
        Ok(self.push(t, rg, Op::ScatterAddRows { a, targets: targets.to_vec() }))
    }

    /// Same-padded stride-1 convolution, `x: [c_in, h, w]`,
    /// `w: [c_out, c_in, k, k]` with odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(mismatch("conv2d", &[sx, sw]));
        }
        let d = ConvDims { c_in: sx[0], c_out: sw[0], h: sx[1], w: sx[2], k: sw[2] };
        let out = conv::conv2d_forward(tx.data(), tw.data(), &d);
        let rg = self.rg(x) || self.rg(w);
        let t = Tensor::new(&[d.c_out, d.h, d.w], out)?;
        Ok(self.push(t, rg, Op::Conv2d { x, w }))
    }

    /// Depthwise same-padded convolution, `w: [c, 1, k, k]`.
    pub fn dwconv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 3 || sw.len() != 4 || sw[0] != sx[0] || sw[1] != 1 || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(mismatch("dwconv2d", &[sx, sw]));
        }
        let out = conv::dwconv2d_forward(tx.data(), tw.data(), sx[0], sx[1], sx[2], sw[2]);
        let rg = self.rg(x) || self.rg(w);
        let t = Tensor::new(sx, out)?;
        Ok(self.push(t, rg, Op::DwConv2d { x, w }))
    }

    /// `[c, h, w]` → `[c, oh, ow]`.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 3 || oh == 0 || ow == 0 {
            return Err(mismatch("adaptive_avg_pool2d", &[s, &[oh, ow]]));
        }
        let out = conv::adaptive_avg_pool_forward(tx.data(), s[0], s[1], s[2], oh, ow);
        let t = Tensor::new(&[s[0], oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::AdaptiveAvgPool { x }))
    }

    /// Sum of absolute values.
    pub fn l1_norm(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|x| x.abs()).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::L1Norm(a))
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::L2Norm(a))
    }

    /// Records an op with a precomputed forward value and a custom backward.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, rule: Box<dyn CustomBackward>) -> Var {
        let rg = inputs.iter().any(|v| self.rg(*v));
        self.push(output, rg, Op::Custom { inputs: inputs.to_vec(), rule })
    }

    /// Reverse sweep from a scalar `loss`; adds into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(KernelError::NotScalar(ls.to_vec()));
        }
        let n = loss.0 + 1;
        let mut g: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        g[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gi) = g[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                add_into_owned(&mut self.leaf_grads[i], gi);
                continue;
            }
            self.backward_node(i, &gi, &mut g);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, gi: &[f64], g: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if rg(*a) {
                    add_into_owned(&mut g[a.0], unbroadcast(gi, val(*a).shape(), out.shape()));
                }
                if rg(*b) {
                    add_into_owned(&mut g[b.0], unbroadcast(gi, val(*b).shape(), out.shape()));
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    add_into_owned(&mut g[a.0], unbroadcast(gi, val(*a).shape(), out.shape()));
                }
                if rg(*b) {
                    let neg: Vec<f64> = gi.iter().map(|x| -x).collect();
                    add_into_owned(&mut g[b.0], unbroadcast(&neg, val(*b).shape(), out.shape()));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ia = broadcast_index(ta.shape(), out.shape());
                let ib = broadcast_index(tb.shape(), out.shape());
                if rg(*a) {
                    let mut ga = vec![0.0; ta.len()];
                    for k in 0..gi.len() {
                        ga[ia[k]] += gi[k] * tb.data()[ib[k]];
                    }
                    add_into_owned(&mut g[a.0], ga);
                }
                if rg(*b) {
                    let mut gb = vec![0.0; tb.len()];
                    for k in 0..gi.len() {
                        gb[ib[k]] += gi[k] * ta.data()[ia[k]];
                    }
                    add_into_owned(&mut g[b.0], gb);
                }
            }
            Op::Scale(a, c) => add_into_owned(&mut g[a.0], gi.iter().map(|x| c * x).collect()),
            Op::AddScalar(a) => add_into(&mut g[a.0], gi),
            Op::Exp(a) => add_into_owned(&mut g[a.0], gi.iter().zip(out.data()).map(|(g, y)| g * y).collect()),
            Op::Log(a) => add_into_owned(&mut g[a.0], gi.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect()),
            Op::Relu(a) => add_into_owned(
                &mut g[a.0],
                gi.iter().zip(val(*a).data()).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
            ),
            Op::Sigmoid(a) => {
                add_into_owned(&mut g[a.0], gi.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect())
            }
            Op::Abs(a) => add_into_owned(
                &mut g[a.0],
                gi.iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -g } else { 0.0 })
                    .collect(),
            ),
            Op::Sqrt(a) => add_into_owned(
                &mut g[a.0],
                gi.iter().zip(out.data()).map(|(g, &y)| if y > 0.0 { g * 0.5 / y } else { 0.0 }).collect(),
            ),
            Op::Powf(a, p) => add_into_owned(
                &mut g[a.0],
                gi.iter().zip(val(*a).data()).map(|(g, &x)| if *p == 0.0 { 0.0 } else { g * p * x.powf(p - 1.0) }).collect(),
            ),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if rg(*a) {
                    // dA = G B^T
                    let mut ga = vec![0.0; m * k];
                    for ii in 0..m {
                        let grow = &gi[ii * n..(ii + 1) * n];
                        for kk in 0..k {
                            let brow = &tb.data()[kk * n..(kk + 1) * n];
                            ga[ii * k + kk] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    add_into_owned(&mut g[a.0], ga);
                }
                if rg(*b) {
                    // dB = A^T G
                    let mut gb = vec![0.0; k * n];
                    for ii in 0..m {
                        let grow = &gi[ii * n..(ii + 1) * n];
                        for kk in 0..k {
                            let av = ta.data()[ii * k + kk];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, x) in gb[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                                *o += av * x;
                            }
                        }
                    }
                    add_into_owned(&mut g[b.0], gb);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        ga[c * m + r] = gi[r * n + c];
                    }
                }
                add_into_owned(&mut g[a.0], ga);
            }
            Op::Reshape(a) => add_into(&mut g[a.0], gi),
            Op::SumAll(a) => add_into_owned(&mut g[a.0], vec![gi[0]; val(*a).len()]),
            Op::SumAxis { a, axis } => {
                let (outer, n, inner) = split_axis(val(*a).shape(), *axis);
                let mut ga = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        ga[(o * n + j) * inner..(o * n + j + 1) * inner]
                            .copy_from_slice(&gi[o * inner..(o + 1) * inner]);
                    }
                }
                add_into_owned(&mut g[a.0], ga);
            }
            Op::MaxAxis { a, argmax, .. } => {
                let mut ga = vec![0.0; val(*a).len()];
                for (k, &src) in argmax.iter().enumerate() {
                    ga[src] += gi[k];
                }
                add_into_owned(&mut g[a.0], ga);
            }
            Op::Softmax { a, axis } => {
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + ii;
                        let dot: f64 = (0..n).map(|j| gi[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            ga[at(j)] = y[at(j)] * (gi[at(j)] - dot);
                        }
                    }
                }
                add_into_owned(&mut g[a.0], ga);
            }
            Op::LogSoftmax { a, axis } => {
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + ii;
                        let s: f64 = (0..n).map(|j| gi[at(j)]).sum();
                        for j in 0..n {
                            ga[at(j)] = gi[at(j)] - y[at(j)].exp() * s;
                        }
                    }
                }
                add_into_owned(&mut g[a.0], ga);
            }
            Op::LayerNorm { a, inv_std } => {
                let n = *out.shape().last().unwrap();
                let y = out.data();
                let mut ga = vec![0.0; y.len()];
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = &gi[r * n..(r + 1) * n];
                    let yr = &y[r * n..(r + 1) * n];
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n as f64;
                    for j in 0..n {
                        ga[r * n + j] = is * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                add_into_owned(&mut g[a.0], ga);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut off = 0;
                for p in parts {
                    let n = val(*p).shape()[*axis];
                    if rg(*p) {
                        let mut gp = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + off) * inner;
                            gp.extend_from_slice(&gi[base..base + n * inner]);
                        }
                        add_into_owned(&mut g[p.0], gp);
                    }
                    off += n;
                }
            }
            Op::Narrow { a, axis, start } => {
                let (outer, n, inner) = split_axis(val(*a).shape(), *axis);
                let len = out.shape()[*axis];
                let mut ga = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    ga[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&gi[o * len * inner..(o + 1) * len * inner]);
                }
                add_into_owned(&mut g[a.0], ga);
            }
            Op::IndexSelect { a, rows } => {
                let ta = val(*a);
                let row = ta.len() / ta.shape()[0].max(1);
                let mut ga = vec![0.0; ta.len()];
                for (k, &r) in rows.iter().enumerate() {
                    for (d, s) in ga[r * row..(r + 1) * row].iter_mut().zip(&gi[k * row..(k + 1) * row]) {
                        *d += s;
                    }
                }
                add_into_owned(&mut g[a.0], ga);
            }
            Op::ScatterAddRows { a, targets } => {
                let d = val(*a).shape()[1];
                let mut ga = vec![0.0; targets.len() * d];
                for (k, t) in targets.iter().enumerate() {
                    if let Some(r) = *t {
                        ga[k * d..(k + 1) * d].copy_from_slice(&gi[r * d..(r + 1) * d]);
                    }
                }
                add_into_owned(&mut g[a.0], ga);
            }
            Op::Conv2d { x, w } => {
                let (tx, tw) = (val(*x), val(*w));
                let (sx, sw) = (tx.shape(), tw.shape());
                let d = ConvDims { c_in: sx[0], c_out: sw[0], h: sx[1], w: sx[2], k: sw[2] };
                let (gx, gw) = conv::conv2d_backward(tx.data(), tw.data(), gi, &d);
                if rg(*x) {
                    add_into_owned(&mut g[x.0], gx);
                }
                if rg(*w) {
                    add_into_owned(&mut g[w.0], gw);
                }
            }
            Op::DwConv2d { x, w } => {
                let (tx, tw) = (val(*x), val(*w));
                let sx = tx.shape();
                let (gx, gw) = conv::dwconv2d_backward(tx.data(), tw.data(), gi, sx[0], sx[1], sx[2], tw.shape()[2]);
                if rg(*x) {
                    add_into_owned(&mut g[x.0], gx);
                }
                if rg(*w) {
                    add_into_owned(&mut g[w.0], gw);
                }
            }
            Op::AdaptiveAvgPool { x } => {
                let s = val(*x).shape();
                let gx = conv::adaptive_avg_pool_backward(gi, s[0], s[1], s[2], out.shape()[1], out.shape()[2]);
                add_into_owned(&mut g[x.0], gx);
            }
            Op::L1Norm(a) => add_into_owned(
                &mut g[a.0],
                val(*a).data().iter().map(|&x| if x > 0.0 { gi[0] } else if x < 0.0 { -gi[0] } else { 0.0 }).collect(),
            ),
            Op::L2Norm(a) => {
                let nrm = out.item();
                let ga = if nrm > 0.0 {
                    val(*a).data().iter().map(|x| gi[0] * x / nrm).collect()
                } else {
                    vec![0.0; val(*a).len()]
                };
                add_into_owned(&mut g[a.0], ga);
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let grads = rule.backward(gi, &ins, out);
                for (v, gv) in inputs.iter().zip(grads) {
                    if let (true, Some(gv)) = (rg(*v), gv) {
                        add_into_owned(&mut g[v.0], gv);
                    }
                }
            }
        }
    }
}
