//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every value computed in a forward pass. Ops append a node
//! holding the output value and enough saved state to run its backward rule;
//! nodes are only ever appended, so inputs always precede the ops that use
//! them and a single reverse sweep visits each op once.
//!
//! Leaves are created with [`Tape::param`] (gradient wanted) or
//! [`Tape::constant`] (no gradient, e.g. detached targets). A node requires
//! a gradient iff at least one of its inputs does; backward rules are only
//! evaluated for those nodes.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract_err, shape_err, Result};
use crate::kernels::{self, ConvGeom};
use crate::math;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Binary elementwise operation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// How a batch-norm node normalizes its input.
#[derive(Debug, Clone)]
pub enum NormStats<'a> {
    /// Per-channel statistics of the current batch (biased variance).
    Batch,
    /// Stored running statistics.
    Fixed { mean: &'a [f32], var: &'a [f32] },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Elem { kind: ElemKind, a: Var, b: Var, scalar_b: bool },
    AddConst(Var),
    MulConst(Var, f32),
    Relu(Var),
    Exp(Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Conv2d { input: Var, kernel: Var, geom: ConvGeom },
    MaxPool2d { input: Var, argmax: Vec<u32> },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f32>, inv_std: Vec<f32>, batch: bool, mean: Vec<f32>, var: Vec<f32> },
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf [`Var`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf created with [`Tape::param`]; `None` for constants
    /// and for intermediate nodes.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Elementwise `a ∘ b` where `b` has `a`'s shape or a single element.
    pub fn elementwise(&mut self, kind: ElemKind, a: Var, b: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let scalar_b = if av.shape() == bv.shape() {
            false
        } else if bv.is_scalar() {
            true
        } else {
            return Err(shape_err!(
                "elementwise {:?}: shapes {:?} and {:?} do not match",
                kind,
                av.shape(),
                bv.shape()
            ));
        };
        let f = |x: f32, y: f32| match kind {
            ElemKind::Add => x + y,
            ElemKind::Sub => x - y,
            ElemKind::Mul => x * y,
            ElemKind::Div => x / y,
        };
        let out: Vec<f32> = if scalar_b {
            let y = bv.data()[0];
            av.data().iter().map(|&x| f(x, y)).collect()
        } else {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        };
        let value = Tensor::new(av.shape(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Elem { kind, a, b, scalar_b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElemKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElemKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElemKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElemKind::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let av = &self.nodes[a.0].value;
        let value = Tensor::new(av.shape(), av.data().iter().map(|&x| x + c).collect()).unwrap();
        let rg = self.rg(&[a]);
        self.push(value, Op::AddConst(a), rg)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let av = &self.nodes[a.0].value;
        let value = Tensor::new(av.shape(), av.data().iter().map(|&x| x * c).collect()).unwrap();
        let rg = self.rg(&[a]);
        self.push(value, Op::MulConst(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let value =
            Tensor::new(av.shape(), av.data().iter().map(|&x| x.max(0.0)).collect()).unwrap();
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let value =
            Tensor::new(av.shape(), av.data().iter().map(|&x| math::exp(x)).collect()).unwrap();
        let rg = self.rg(&[a]);
        self.push(value, Op::Exp(a), rg)
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (&[m, k], &[k2, n]) = (av.shape(), bv.shape()) else {
            return Err(shape_err!("matmul needs 2-D operands, got {:?} and {:?}", av.shape(), bv.shape()));
        };
        if k != k2 {
            return Err(shape_err!("matmul inner dimensions differ: {:?} · {:?}", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, av.data(), bv.data(), &mut out);
        let value = Tensor::new(&[m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `x[B×N] + bias[N]`, bias repeated over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[bias.0].value;
        let n = *xv.shape().last().unwrap();
        if xv.shape().len() != 2 || bv.numel() != n {
            return Err(shape_err!("row bias {:?} does not fit {:?}", bv.shape(), xv.shape()));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddRowBias(x, bias), rg))
    }

    /// 2-D cross-correlation of `input[B×C×H×W]` with `kernel[O×C×kh×kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let iv = &self.nodes[input.0].value;
        let kv = &self.nodes[kernel.0].value;
        let (&[b, c, h, w], &[o, kc, kh, kw]) = (iv.shape(), kv.shape()) else {
            return Err(shape_err!("conv2d needs 4-D input and kernel, got {:?} and {:?}", iv.shape(), kv.shape()));
        };
        if c != kc {
            return Err(shape_err!("conv2d channel mismatch: input {:?}, kernel {:?}", iv.shape(), kv.shape()));
        }
        if stride == 0 {
            return Err(shape_err!("conv2d stride must be positive"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(shape_err!(
                "conv2d kernel {}x{} larger than padded input {}x{}",
                kh,
                kw,
                h + 2 * padding,
                w + 2 * padding
            ));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let (pl, p) = (geom.patch_len(), geom.out_len());
        let mut cols = vec![0.0; pl * p];
        let mut out = vec![0.0; b * o * p];
        for (img, dst) in iv.data().chunks_exact(c * h * w).zip(out.chunks_exact_mut(o * p)) {
            kernels::im2col(&geom, img, &mut cols);
            kernels::gemm_nn(o, pl, p, kv.data(), &cols, dst);
        }
        let value = Tensor::new(&[b, o, geom.out_h, geom.out_w], out)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(value, Op::Conv2d { input, kernel, geom }, rg))
    }

    /// Non-overlapping `k×k` max pooling over `[B×C×H×W]` (trailing rows
    /// and columns that do not fill a window are dropped).
    pub fn max_pool2d(&mut self, input: Var, k: usize) -> Result<Var> {
        let iv = &self.nodes[input.0].value;
        let &[b, c, h, w] = iv.shape() else {
            return Err(shape_err!("max_pool2d needs a 4-D input, got {:?}", iv.shape()));
        };
        if k == 0 || k > h || k > w {
            return Err(shape_err!("max_pool2d window {} does not fit {:?}", k, iv.shape()));
        }
        let (oh, ow) = (h / k, w / k);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        let data = iv.data();
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * k + dy) * w + ox * k + dx;
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new(&[b, c, oh, ow], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, rg))
    }

    /// Batch normalization over channel axis 1 of `[B×C]` or `[B×C×H×W]`:
    /// `γ·(x − μ)/sqrt(σ² + eps) + β`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
        eps: f32,
    ) -> Result<Var> {
        let iv = &self.nodes[input.0].value;
        let shape = iv.shape();
        if shape.len() != 2 && shape.len() != 4 {
            return Err(shape_err!("batch_norm needs [B×C] or [B×C×H×W], got {:?}", shape));
        }
        let (b, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let gv = self.nodes[gamma.0].value.data();
        let bv = self.nodes[beta.0].value.data();
        if gv.len() != c || bv.len() != c {
            return Err(shape_err!("batch_norm affine params must have {} entries", c));
        }
        let data = iv.data();
        let count = (b * spatial) as f32;
        let (mean, var, batch) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for ch in 0..c {
                    let mut s = 0.0f32;
                    for n in 0..b {
                        let off = (n * c + ch) * spatial;
                        for &x in &data[off..off + spatial] {
                            s += x;
                        }
                    }
                    let m = s / count;
                    let mut v = 0.0f32;
                    for n in 0..b {
                        let off = (n * c + ch) * spatial;
                        for &x in &data[off..off + spatial] {
                            v += (x - m) * (x - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = v / count;
                }
                (mean, var, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err!("batch_norm running stats must have {} entries", c));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / math::sqrt(v + eps)).collect();
        let mut xhat = vec![0.0f32; data.len()];
        let mut out = vec![0.0f32; data.len()];
        for n in 0..b {
            for ch in 0..c {
                let off = (n * c + ch) * spatial;
                let (m, is, g, be) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
                for i in off..off + spatial {
                    let xh = (data[i] - m) * is;
                    xhat[i] = xh;
                    out[i] = g * xh + be;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[input, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch, mean, var },
            rg,
        ))
    }

    /// Per-channel `(mean, biased variance)` a batch-norm node normalized
    /// with, when it used batch statistics.
    pub fn batch_stats(&self, var: Var) -> Option<(&[f32], &[f32])> {
        match &self.nodes[var.0].op {
            Op::BatchNorm { batch: true, mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Row-wise softmax of a `[B×C]` tensor (max-subtracted).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let value = softmax_rows(&self.nodes[a.0].value)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// Row-wise log-softmax of a `[B×C]` tensor via log-sum-exp.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let value = log_softmax_rows(&self.nodes[a.0].value)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::LogSoftmax(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f32 = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel() as f32;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Runs the reverse sweep from a scalar `loss` and consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let Tape { nodes } = self;
        let lv = &nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(contract_err!("backward needs a scalar loss, got shape {:?}", lv.shape()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.0].requires_grad {
            return Ok(Gradients { grads: (0..nodes.len()).map(|_| None).collect() });
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            backprop(&nodes, node, &g, &mut grads);
        }

        let out = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape(), g).expect("gradient shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f32>>], target: Var, contrib: Vec<f32>) {
    if !nodes[target.0].requires_grad {
        return;
    }
    match &mut grads[target.0] {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    let needs = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Elem { kind, a, b, scalar_b } => {
            let (x, y) = (val(*a), val(*b));
            let yat = |i: usize| if *scalar_b { y[0] } else { y[i] };
            if needs(*a) {
                let da: Vec<f32> = match kind {
                    ElemKind::Add | ElemKind::Sub => g.to_vec(),
                    ElemKind::Mul => g.iter().enumerate().map(|(i, &gi)| gi * yat(i)).collect(),
                    ElemKind::Div => g.iter().enumerate().map(|(i, &gi)| gi / yat(i)).collect(),
                };
                accumulate(nodes, grads, *a, da);
            }
            if needs(*b) {
                let per: Vec<f32> = match kind {
                    ElemKind::Add => g.to_vec(),
                    ElemKind::Sub => g.iter().map(|&gi| -gi).collect(),
                    ElemKind::Mul => g.iter().zip(x).map(|(&gi, &xi)| gi * xi).collect(),
                    ElemKind::Div => g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| -gi * x[i] / (yat(i) * yat(i)))
                        .collect(),
                };
                let db = if *scalar_b { vec![per.iter().sum()] } else { per };
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::AddConst(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::MulConst(a, c) => accumulate(nodes, grads, *a, g.iter().map(|&gi| gi * c).collect()),
        Op::Relu(a) => {
            let x = val(*a);
            let da = g.iter().zip(x).map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 }).collect();
            accumulate(nodes, grads, *a, da);
        }
        Op::Exp(a) => {
            let y = node.value.data();
            accumulate(nodes, grads, *a, g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect());
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if needs(*a) {
                let mut da = vec![0.0; m * k];
                kernels::gemm_nt(m, n, k, g, bv.data(), &mut da);
                accumulate(nodes, grads, *a, da);
            }
            if needs(*b) {
                let mut db = vec![0.0; k * n];
                kernels::gemm_tn(k, m, n, av.data(), g, &mut db);
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::AddRowBias(x, bias) => {
            if needs(*x) {
                accumulate(nodes, grads, *x, g.to_vec());
            }
            if needs(*bias) {
                let n = nodes[bias.0].value.numel();
                let mut db = vec![0.0; n];
                for row in g.chunks_exact(n) {
                    for (d, &r) in db.iter_mut().zip(row) {
                        *d += r;
                    }
                }
                accumulate(nodes, grads, *bias, db);
            }
        }
        Op::Conv2d { input, kernel, geom } => {
            let (iv, kv) = (&nodes[input.0].value, &nodes[kernel.0].value);
            let o = kv.shape()[0];
            let (pl, p) = (geom.patch_len(), geom.out_len());
            let img_len = geom.channels * geom.height * geom.width;
            let mut cols = vec![0.0; pl * p];
            let mut dk = if needs(*kernel) { Some(vec![0.0; kv.numel()]) } else { None };
            let mut dx = if needs(*input) { Some(vec![0.0; iv.numel()]) } else { None };
            let mut dcols = vec![0.0; pl * p];
            for (bi, gout) in g.chunks_exact(o * p).enumerate() {
                if let Some(dk) = dk.as_mut() {
                    kernels::im2col(geom, &iv.data()[bi * img_len..(bi + 1) * img_len], &mut cols);
                    kernels::gemm_nt(o, p, pl, gout, &cols, dk);
                }
                if let Some(dx) = dx.as_mut() {
                    dcols.iter_mut().for_each(|v| *v = 0.0);
                    kernels::gemm_tn(pl, o, p, kv.data(), gout, &mut dcols);
                    kernels::col2im(geom, &dcols, &mut dx[bi * img_len..(bi + 1) * img_len]);
                }
            }
            if let Some(dk) = dk {
                accumulate(nodes, grads, *kernel, dk);
            }
            if let Some(dx) = dx {
                accumulate(nodes, grads, *input, dx);
            }
        }
        Op::MaxPool2d { input, argmax } => {
            let mut dx = vec![0.0; nodes[input.0].value.numel()];
            for (&idx, &gi) in argmax.iter().zip(g) {
                dx[idx as usize] += gi;
            }
            accumulate(nodes, grads, *input, dx);
        }
        Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch, .. } => {
            let shape = nodes[input.0].value.shape();
            let (b, c) = (shape[0], shape[1]);
            let spatial: usize = shape[2..].iter().product();
            let gam = val(*gamma);
            let mut dgamma = vec![0.0f32; c];
            let mut dbeta = vec![0.0f32; c];
            for n in 0..b {
                for ch in 0..c {
                    let off = (n * c + ch) * spatial;
                    for i in off..off + spatial {
                        dgamma[ch] += g[i] * xhat[i];
                        dbeta[ch] += g[i];
                    }
                }
            }
            if needs(*input) {
                let mut dx = vec![0.0f32; g.len()];
                let count = (b * spatial) as f32;
                for ch in 0..c {
                    let scale = gam[ch] * inv_std[ch];
                    for n in 0..b {
                        let off = (n * c + ch) * spatial;
                        for i in off..off + spatial {
                            dx[i] = if *batch {
                                scale * (g[i] - dbeta[ch] / count - xhat[i] * dgamma[ch] / count)
                            } else {
                                scale * g[i]
                            };
                        }
                    }
                }
                accumulate(nodes, grads, *input, dx);
            }
            accumulate(nodes, grads, *gamma, dgamma);
            accumulate(nodes, grads, *beta, dbeta);
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::Softmax(a) => {
            let s = &node.value;
            let cols = s.shape()[1];
            let mut da = vec![0.0; g.len()];
            for ((srow, grow), drow) in
                s.data().chunks_exact(cols).zip(g.chunks_exact(cols)).zip(da.chunks_exact_mut(cols))
            {
                let dot: f32 = srow.iter().zip(grow).map(|(&si, &gi)| si * gi).sum();
                for ((d, &si), &gi) in drow.iter_mut().zip(srow).zip(grow) {
                    *d = si * (gi - dot);
                }
            }
            accumulate(nodes, grads, *a, da);
        }
        Op::LogSoftmax(a) => {
            let ls = &node.value;
            let cols = ls.shape()[1];
            let mut da = vec![0.0; g.len()];
            for ((lrow, grow), drow) in
                ls.data().chunks_exact(cols).zip(g.chunks_exact(cols)).zip(da.chunks_exact_mut(cols))
            {
                let gsum: f32 = grow.iter().sum();
                for ((d, &li), &gi) in drow.iter_mut().zip(lrow).zip(grow) {
                    *d = gi - math::exp(li) * gsum;
                }
            }
            accumulate(nodes, grads, *a, da);
        }
        Op::Sum(a) => {
            let n = nodes[a.0].value.numel();
            accumulate(nodes, grads, *a, vec![g[0]; n]);
        }
    }
}

fn check_2d(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[b, c] => Ok((b, c)),
        s => Err(shape_err!("expected a [B×C] tensor, got {:?}", s)),
    }
}

/// Row-wise softmax with max subtraction. Rows sum to 1 up to rounding.
pub fn softmax_rows(t: &Tensor) -> Result<Tensor> {
    let (_, c) = check_2d(t)?;
    let mut out = t.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = math::exp(*v - m);
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(t.shape(), out)
}

/// Row-wise log-softmax: `x − max − ln Σ exp(x − max)`.
pub fn log_softmax_rows(t: &Tensor) -> Result<Tensor> {
    let (_, c) = check_2d(t)?;
    let mut out = t.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let s: f32 = row.iter().map(|&v| math::exp(v - m)).sum();
        let lse = m + math::ln(s);
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::new(t.shape(), out)
}
