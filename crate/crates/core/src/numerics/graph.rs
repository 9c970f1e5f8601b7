//! Reverse-mode differentiation over a recorded computation graph.
//!
//! Every op appends a node holding its output value plus whatever it needs
//! for the backward sweep. Parameters are borrowed from a [`ParamSet`] and
//! never copied, so the same graph type serves inference.

use super::kernels::{self, gemm, sigmoid};
use super::{Gradient, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Which key positions each query may attend to.
#[derive(Clone, Debug, PartialEq)]
pub enum AttnMask {
    None,
    /// Query `i` sees keys `0..=i`.
    Causal,
    /// Row-major `queries × keys`; `true` means allowed.
    Explicit(Vec<bool>),
}

impl AttnMask {
    fn allowed(&self, i: usize, j: usize, tk: usize) -> bool {
        match self {
            AttnMask::None => true,
            AttnMask::Causal => j <= i,
            AttnMask::Explicit(m) => m[i * tk + j],
        }
    }
}

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Input,
    Param(usize),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow { x: Var, row: Var },
    Mul(Var, Var),
    Scale(Var, f64),
    Swish(Var),
    Relu(Var),
    Glu(Var),
    LayerNorm { x: Var, g: Var, b: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Conv1d { x: Var, w: Var, b: Option<Var>, width: usize, stride: usize },
    DepthwiseConv { x: Var, w: Var, b: Var },
    PadRows { x: Var, before: usize },
    SliceRows { x: Var, start: usize },
    SelectRows { x: Var, idx: Vec<usize> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node<'p>>,
    param_vars: Vec<Option<Var>>,
}

static NO_PARAMS: ParamSet = ParamSet::new();

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    /// Graph over constants only.
    pub fn constant() -> Graph<'static> {
        Graph::new(&NO_PARAMS)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, t: Tensor, op: Op, name: &'static str) -> Result<Var> {
        t.check_finite(name)?;
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            Op::Linear { x, w, b } => self.needs(*x) || self.needs(*w) || b.is_some_and(|b| self.needs(b)),
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Mul(a, b) => self.needs(*a) || self.needs(*b),
            Op::AddRow { x, row } => self.needs(*x) || self.needs(*row),
            Op::Scale(a, _) | Op::Swish(a) | Op::Relu(a) | Op::Glu(a) | Op::Sum(a) => self.needs(*a),
            Op::LayerNorm { x, g, b, .. } => self.needs(*x) || self.needs(*g) || self.needs(*b),
            Op::Attention { q, k, v, .. } => self.needs(*q) || self.needs(*k) || self.needs(*v),
            Op::Conv1d { x, w, b, .. } => self.needs(*x) || self.needs(*w) || b.is_some_and(|b| self.needs(b)),
            Op::DepthwiseConv { x, w, b } => self.needs(*x) || self.needs(*w) || self.needs(*b),
            Op::PadRows { x, .. } | Op::SliceRows { x, .. } | Op::SelectRows { x, .. } => self.needs(*x),
            Op::Embedding { table, .. } => self.needs(*table),
            Op::CrossEntropy { logits, .. } => self.needs(*logits),
        };
        self.nodes.push(Node {
            value: Value::Owned(t),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Input, "input")
    }

    pub fn input_ref(&mut self, t: &'p Tensor) -> Result<Var> {
        t.check_finite("input")?;
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Input,
            needs_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf for parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Borrowed(self.params.get(id)),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id] = Some(v);
        v
    }

    /// `x · w (+ b)` with `x: n × in`, `w: in × out`, `b: 1 × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        let (n, inp) = (xt.rows(), xt.cols());
        if wt.rows() != inp {
            return Err(shape_err("linear", format!("input dim {} vs weight rows {}", inp, wt.rows())));
        }
        let outp = wt.cols();
        let bias = match b {
            Some(b) => {
                let bt = self.value(b);
                if bt.len() != outp {
                    return Err(shape_err("linear", format!("bias {} vs out {}", bt.len(), outp)));
                }
                Some(bt.data())
            }
            None => None,
        };
        let out = kernels::linear(xt.data(), n, wt.data(), bias, inp, outp);
        self.push(Tensor::matrix(n, outp, out)?, Op::Linear { x, w, b }, "linear")
    }

    /// `op(a) · op(b)` for rank-2 operands.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let (m, k1) = if ta { (at.cols(), at.rows()) } else { (at.rows(), at.cols()) };
        let (k2, n) = if tb { (bt.cols(), bt.rows()) } else { (bt.rows(), bt.cols()) };
        if k1 != k2 {
            return Err(shape_err("matmul", format!("inner dims {k1} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k1, n, at.data(), ta, bt.data(), tb, &mut out, 0.0);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul { a, b, ta, tb }, "matmul")
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", at.shape(), bt.shape())));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let at = self.value(a);
        let data = at.data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(at.shape().to_vec(), data)?;
        self.push(t, Op::Add(a, b), "add")
    }

    /// Adds a `1 × cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xt, rt) = (self.value(x), self.value(row));
        let c = xt.cols();
        if rt.len() != c {
            return Err(shape_err("add_row", format!("row {} vs cols {}", rt.len(), c)));
        }
        let mut data = xt.data().to_vec();
        for chunk in data.chunks_mut(c.max(1)) {
            for (v, r) in chunk.iter_mut().zip(rt.data()) {
                *v += r;
            }
        }
        let t = Tensor::new(xt.shape().to_vec(), data)?;
        self.push(t, Op::AddRow { x, row }, "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let at = self.value(a);
        let data = at.data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(at.shape().to_vec(), data)?;
        self.push(t, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let at = self.value(a);
        let t = Tensor::new(at.shape().to_vec(), at.data().iter().map(|v| v * s).collect())?;
        self.push(t, Op::Scale(a, s), "scale")
    }

    pub fn swish(&mut self, a: Var) -> Result<Var> {
        let at = self.value(a);
        let t = Tensor::new(at.shape().to_vec(), at.data().iter().map(|&v| kernels::swish(v)).collect())?;
        self.push(t, Op::Swish(a), "swish")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let at = self.value(a);
        let t = Tensor::new(at.shape().to_vec(), at.data().iter().map(|&v| v.max(0.0)).collect())?;
        self.push(t, Op::Relu(a), "relu")
    }

    /// Gated linear unit over columns: `x[:, :c] * sigmoid(x[:, c:])`.
    pub fn glu(&mut self, a: Var) -> Result<Var> {
        let at = self.value(a);
        let (n, c2) = (at.rows(), at.cols());
        if c2 % 2 != 0 {
            return Err(shape_err("glu", format!("odd width {c2}")));
        }
        let c = c2 / 2;
        let mut out = Vec::with_capacity(n * c);
        for r in 0..n {
            let row = at.row(r);
            for j in 0..c {
                out.push(row[j] * sigmoid(row[c + j]));
            }
        }
        self.push(Tensor::matrix(n, c, out)?, Op::Glu(a), "glu")
    }

    /// Row-wise layer normalization.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var, eps: f64) -> Result<Var> {
        let xt = self.value(x);
        let (n, c) = (xt.rows(), xt.cols());
        let (gt, bt) = (self.value(g), self.value(b));
        if gt.len() != c || bt.len() != c {
            return Err(shape_err("layer_norm", format!("gain {} bias {} vs dim {}", gt.len(), bt.len(), c)));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("layer_norm eps must be positive".into()));
        }
        let mut out = vec![0.0; n * c];
        let mut xhat = vec![0.0; n * c];
        let mut rstd = vec![0.0; n];
        let ones = vec![1.0; c];
        let zeros = vec![0.0; c];
        for r in 0..n {
            rstd[r] = kernels::layer_norm_row(xt.row(r), &ones, &zeros, eps, &mut xhat[r * c..(r + 1) * c]);
            for j in 0..c {
                out[r * c + j] = xhat[r * c + j] * gt.data()[j] + bt.data()[j];
            }
        }
        let t = Tensor::new(xt.shape().to_vec(), out)?;
        self.push(t, Op::LayerNorm { x, g, b, xhat, rstd }, "layer_norm")
    }

    /// Scaled dot-product attention split over `heads`, without projections.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &AttnMask) -> Result<Var> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let (tq, d) = (qt.rows(), qt.cols());
        let tk = kt.rows();
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", format!("dim {d} not divisible by {heads} heads")));
        }
        if kt.cols() != d || vt.cols() != d || vt.rows() != tk {
            return Err(shape_err("attention", "key/value shapes disagree with queries".into()));
        }
        if let AttnMask::Explicit(m) = mask {
            if m.len() != tq * tk {
                return Err(shape_err("attention", format!("mask len {} vs {}x{}", m.len(), tq, tk)));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * tq * tk];
        let mut out = vec![0.0; tq * d];
        let mut scores = vec![0.0; tk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let qi = &qt.row(i)[off..off + dh];
                let mut any = false;
                let mut max = f64::NEG_INFINITY;
                for j in 0..tk {
                    if mask.allowed(i, j, tk) {
                        let s = kernels::dot(qi, &kt.row(j)[off..off + dh]) * scale;
                        scores[j] = s;
                        max = max.max(s);
                        any = true;
                    }
                }
                if !any {
                    return Err(Error::InvalidArgument(format!("attention row {i} fully masked")));
                }
                let p = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let mut sum = 0.0;
                for j in 0..tk {
                    if mask.allowed(i, j, tk) {
                        p[j] = (scores[j] - max).exp();
                        sum += p[j];
                    }
                }
                let o = &mut out[i * d + off..i * d + off + dh];
                for j in 0..tk {
                    if p[j] != 0.0 {
                        p[j] /= sum;
                        let vj = &vt.row(j)[off..off + dh];
                        for (ov, vv) in o.iter_mut().zip(vj) {
                            *ov += p[j] * vv;
                        }
                    }
                }
            }
        }
        self.push(Tensor::matrix(tq, d, out)?, Op::Attention { q, k, v, heads, probs }, "attention")
    }

    /// Attention weights of the most recent attention node `v`, laid out `heads × tq × tk`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Valid (unpadded) strided 1-D convolution over rows.
    ///
    /// `w` is `(width · in) × out`, laid out so that row `j · in + c` weighs
    /// input channel `c` at tap `j`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, width: usize, stride: usize) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        let (t, din) = (xt.rows(), xt.cols());
        if stride == 0 || width == 0 {
            return Err(Error::InvalidArgument("conv1d width and stride must be positive".into()));
        }
        if t < width {
            return Err(shape_err("conv1d", format!("length {t} shorter than kernel width {width}")));
        }
        if wt.rows() != width * din {
            return Err(shape_err("conv1d", format!("weight rows {} vs width*in {}", wt.rows(), width * din)));
        }
        let dout = wt.cols();
        let tout = (t - width) / stride + 1;
        let col = im2col(xt.data(), din, width, stride, tout);
        let bias = b.map(|b| self.value(b).data());
        if bias.is_some_and(|b| b.len() != dout) {
            return Err(shape_err("conv1d", "bias length".into()));
        }
        let out = kernels::linear(&col, tout, wt.data(), bias, width * din, dout);
        self.push(Tensor::matrix(tout, dout, out)?, Op::Conv1d { x, w, b, width, stride }, "conv1d")
    }

    /// Per-channel temporal convolution with symmetric zero padding; `w` is `width × dim`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let (t, d) = (xt.rows(), xt.cols());
        let width = wt.rows();
        if width % 2 == 0 || wt.cols() != d || bt.len() != d {
            return Err(shape_err("depthwise_conv", format!("kernel {:?} for dim {}", wt.shape(), d)));
        }
        let pad = width / 2;
        let mut out = vec![0.0; t * d];
        for i in 0..t {
            let o = &mut out[i * d..(i + 1) * d];
            o.copy_from_slice(bt.data());
            for j in 0..width {
                let src = i + j;
                if src < pad || src - pad >= t {
                    continue;
                }
                let xr = xt.row(src - pad);
                let wr = wt.row(j);
                for c in 0..d {
                    o[c] += wr[c] * xr[c];
                }
            }
        }
        self.push(Tensor::matrix(t, d, out)?, Op::DepthwiseConv { x, w, b }, "depthwise_conv")
    }

    pub fn pad_rows(&mut self, x: Var, before: usize, after: usize) -> Result<Var> {
        let xt = self.value(x);
        let c = xt.cols();
        let mut data = vec![0.0; before * c];
        data.extend_from_slice(xt.data());
        data.resize(data.len() + after * c, 0.0);
        let t = Tensor::matrix(xt.rows() + before + after, c, data)?;
        self.push(t, Op::PadRows { x, before }, "pad_rows")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        if start + len > xt.rows() {
            return Err(shape_err("slice_rows", format!("{}..{} of {}", start, start + len, xt.rows())));
        }
        let c = xt.cols();
        let t = Tensor::matrix(len, c, xt.data()[start * c..(start + len) * c].to_vec())?;
        self.push(t, Op::SliceRows { x, start }, "slice_rows")
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xt = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xt.rows()) {
            return Err(shape_err("select_rows", format!("row {} of {}", bad, xt.rows())));
        }
        let data = idx.iter().flat_map(|&i| xt.row(i).iter().copied()).collect();
        let t = Tensor::matrix(idx.len(), xt.cols(), data)?;
        self.push(t, Op::SelectRows { x, idx: idx.to_vec() }, "select_rows")
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= tt.rows()) {
            return Err(shape_err("embedding", format!("id {} of {}", bad, tt.rows())));
        }
        let data = ids.iter().flat_map(|&i| tt.row(i).iter().copied()).collect();
        let t = Tensor::matrix(ids.len(), tt.cols(), data)?;
        self.push(t, Op::Embedding { table, ids: ids.to_vec() }, "embedding")
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lt = self.value(logits);
        let (n, c) = (lt.rows(), lt.cols());
        if n != targets.len() {
            return Err(shape_err("cross_entropy", format!("{} rows vs {} targets", n, targets.len())));
        }
        if n == 0 {
            return Err(Error::Empty("cross_entropy targets"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(shape_err("cross_entropy", format!("target {bad} of {c} classes")));
        }
        let mut probs = lt.data().to_vec();
        let mut nll = 0.0;
        for (r, &tgt) in targets.iter().enumerate() {
            let row = &mut probs[r * c..(r + 1) * c];
            let lse = kernels::softmax_in_place(row);
            nll += lse - lt.row(r)[tgt];
        }
        let loss = Tensor::scalar(nll / n as f64);
        self.push(loss, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, "cross_entropy")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// Gradients of scalar `loss` with respect to every parameter of the graph's set.
    pub fn backward(&self, loss: Var) -> Result<Gradient> {
        let mut grad = Gradient::zeros_like(self.params);
        self.backward_into(loss, &mut grad, 1.0)?;
        Ok(grad)
    }

    /// Accumulates `scale · ∂loss/∂θ` into `grad`.
    pub fn backward_into(&self, loss: Var, grad: &mut Gradient, scale: f64) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !grad.is_congruent(self.params) {
            return Err(Error::Shape("gradient buffer does not match parameter set".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![scale]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &gout, &mut grads, grad);
        }
        for t in grad.tensors() {
            t.check_finite("backward")?;
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>], pgrad: &mut Gradient) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let len = self.value(v).len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        let out = node.value.get();
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                for (p, g) in pgrad.get_mut(*id).data_mut().iter_mut().zip(gout) {
                    *p += g;
                }
            }
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (n, inp, outp) = (xt.rows(), xt.cols(), wt.cols());
                acc(*x, &mut |dx| gemm(n, outp, inp, gout, false, wt.data(), true, dx, 1.0));
                acc(*w, &mut |dw| gemm(inp, n, outp, xt.data(), true, gout, false, dw, 1.0));
                if let Some(b) = b {
                    acc(*b, &mut |db| col_sum_into(gout, outp, db));
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, n) = (out.rows(), out.cols());
                let k = if *ta { at.rows() } else { at.cols() };
                // C = op(A) op(B); dA = dC op(B)^T (then transposed when ta).
                acc(*a, &mut |da| {
                    if *ta {
                        gemm(k, n, m, bt.data(), *tb, gout, true, da, 1.0);
                    } else {
                        gemm(m, n, k, gout, false, bt.data(), !*tb, da, 1.0);
                    }
                });
                acc(*b, &mut |db| {
                    if *tb {
                        gemm(n, m, k, gout, true, at.data(), *ta, db, 1.0);
                    } else {
                        gemm(k, m, n, at.data(), !*ta, gout, false, db, 1.0);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, gout));
                acc(*b, &mut |d| add_into(d, gout));
            }
            Op::AddRow { x, row } => {
                let c = out.cols();
                acc(*x, &mut |d| add_into(d, gout));
                acc(*row, &mut |d| col_sum_into(gout, c, d));
            }
            Op::Mul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                acc(*a, &mut |d| {
                    for ((dv, g), y) in d.iter_mut().zip(gout).zip(bt.data()) {
                        *dv += g * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((dv, g), x) in d.iter_mut().zip(gout).zip(at.data()) {
                        *dv += g * x;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| {
                for (dv, g) in d.iter_mut().zip(gout) {
                    *dv += g * s;
                }
            }),
            Op::Swish(a) => {
                let at = self.value(*a);
                acc(*a, &mut |d| {
                    for ((dv, g), &x) in d.iter_mut().zip(gout).zip(at.data()) {
                        let s = sigmoid(x);
                        *dv += g * s * (1.0 + x * (1.0 - s));
                    }
                });
            }
            Op::Relu(a) => {
                let at = self.value(*a);
                acc(*a, &mut |d| {
                    for ((dv, g), &x) in d.iter_mut().zip(gout).zip(at.data()) {
                        if x > 0.0 {
                            *dv += g;
                        }
                    }
                });
            }
            Op::Glu(a) => {
                let at = self.value(*a);
                let (n, c) = (out.rows(), out.cols());
                acc(*a, &mut |d| {
                    for r in 0..n {
                        let row = at.row(r);
                        for j in 0..c {
                            let g = gout[r * c + j];
                            let s = sigmoid(row[c + j]);
                            d[r * 2 * c + j] += g * s;
                            d[r * 2 * c + c + j] += g * row[j] * s * (1.0 - s);
                        }
                    }
                });
            }
            Op::LayerNorm { x, g, b, xhat, rstd } => {
                let gt = self.value(*g);
                let (n, c) = (out.rows(), out.cols());
                acc(*g, &mut |dg| {
                    for r in 0..n {
                        for j in 0..c {
                            dg[j] += gout[r * c + j] * xhat[r * c + j];
                        }
                    }
                });
                acc(*b, &mut |db| col_sum_into(gout, c, db));
                acc(*x, &mut |dx| {
                    let mut dxhat = vec![0.0; c];
                    for r in 0..n {
                        let xh = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxhat[j] = gout[r * c + j] * gt.data()[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = kernels::dot(&dxhat, xh) / c as f64;
                        for j in 0..c {
                            dx[r * c + j] += rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (qt, kt, vt) = (self.value(*q), self.value(*k), self.value(*v));
                let (tq, d) = (qt.rows(), qt.cols());
                let tk = kt.rows();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; tq * d];
                let mut dk = vec![0.0; tk * d];
                let mut dv = vec![0.0; tk * d];
                let mut dp = vec![0.0; tk];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..tq {
                        let p = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                        let go = &gout[i * d + off..i * d + off + dh];
                        let mut dot_pdp = 0.0;
                        for j in 0..tk {
                            if p[j] == 0.0 {
                                dp[j] = 0.0;
                                continue;
                            }
                            let vj = &vt.row(j)[off..off + dh];
                            dp[j] = kernels::dot(go, vj);
                            dot_pdp += p[j] * dp[j];
                            let dvj = &mut dv[j * d + off..j * d + off + dh];
                            for (a, g) in dvj.iter_mut().zip(go) {
                                *a += p[j] * g;
                            }
                        }
                        let qi = &qt.row(i)[off..off + dh];
                        for j in 0..tk {
                            if p[j] == 0.0 {
                                continue;
                            }
                            let ds = p[j] * (dp[j] - dot_pdp) * scale;
                            let kj = &kt.row(j)[off..off + dh];
                            let dqi = &mut dq[i * d + off..i * d + off + dh];
                            for (a, kv) in dqi.iter_mut().zip(kj) {
                                *a += ds * kv;
                            }
                            let dkj = &mut dk[j * d + off..j * d + off + dh];
                            for (a, qv) in dkj.iter_mut().zip(qi) {
                                *a += ds * qv;
                            }
                        }
                    }
                }
                acc(*q, &mut |d| add_into(d, &dq));
                acc(*k, &mut |d| add_into(d, &dk));
                acc(*v, &mut |d| add_into(d, &dv));
            }
            Op::Conv1d { x, w, b, width, stride } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let din = xt.cols();
                let (tout, dout) = (out.rows(), out.cols());
                let kin = width * din;
                acc(*w, &mut |dw| {
                    let col = im2col(xt.data(), din, *width, *stride, tout);
                    gemm(kin, tout, dout, &col, true, gout, false, dw, 1.0);
                });
                if let Some(b) = b {
                    acc(*b, &mut |db| col_sum_into(gout, dout, db));
                }
                acc(*x, &mut |dx| {
                    let mut dcol = vec![0.0; tout * kin];
                    gemm(tout, dout, kin, gout, false, wt.data(), true, &mut dcol, 0.0);
                    for t in 0..tout {
                        let base = t * stride * din;
                        for (a, g) in dx[base..base + kin].iter_mut().zip(&dcol[t * kin..(t + 1) * kin]) {
                            *a += g;
                        }
                    }
                });
            }
            Op::DepthwiseConv { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (t, d) = (xt.rows(), xt.cols());
                let width = wt.rows();
                let pad = width / 2;
                acc(*b, &mut |db| col_sum_into(gout, d, db));
                acc(*w, &mut |dw| {
                    for i in 0..t {
                        for j in 0..width {
                            let src = i + j;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            let xr = xt.row(src - pad);
                            for c in 0..d {
                                dw[j * d + c] += gout[i * d + c] * xr[c];
                            }
                        }
                    }
                });
                acc(*x, &mut |dx| {
                    for i in 0..t {
                        for j in 0..width {
                            let src = i + j;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            let wr = wt.row(j);
                            let s = src - pad;
                            for c in 0..d {
                                dx[s * d + c] += gout[i * d + c] * wr[c];
                            }
                        }
                    }
                });
            }
            Op::PadRows { x, before } => {
                let c = out.cols();
                let len = self.value(*x).len();
                acc(*x, &mut |dx| add_into(dx, &gout[before * c..before * c + len]));
            }
            Op::SliceRows { x, start } => {
                let c = out.cols();
                acc(*x, &mut |dx| add_into(&mut dx[start * c..start * c + gout.len()], gout));
            }
            Op::SelectRows { x, idx } => {
                let c = out.cols();
                acc(*x, &mut |dx| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut dx[i * c..(i + 1) * c], &gout[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let c = out.cols();
                acc(*table, &mut |dt| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut dt[i * c..(i + 1) * c], &gout[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.value(*logits).cols();
                let n = targets.len();
                let g = gout[0] / n as f64;
                acc(*logits, &mut |dl| {
                    for (r, &tgt) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == tgt { 1.0 } else { 0.0 };
                            dl[r * c + j] += g * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let g = gout[0];
                acc(*a, &mut |d| d.iter_mut().for_each(|v| *v += g));
            }
        }
    }
}

fn im2col(x: &[f64], din: usize, width: usize, stride: usize, tout: usize) -> Vec<f64> {
    let kin = width * din;
    let mut col = Vec::with_capacity(tout * kin);
    for t in 0..tout {
        let base = t * stride * din;
        col.extend_from_slice(&x[base..base + kin]);
    }
    col
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn col_sum_into(g: &[f64], cols: usize, dst: &mut [f64]) {
    for row in g.chunks(cols.max(1)) {
        add_into(dst, row);
    }
}
