//! Shared gradient-check machinery: a double-precision reference forward
//! pass, finite differences, and a small graph language that can be built
//! both on the tape and on the reference.

#![allow(dead_code)]

use cotta_core::nn::{build_model, ParamFilter, StatsMode};
use cotta_core::rng;
use cotta_core::tape::{NormStats, Tape, Var};
use cotta_core::Tensor;
use rand::Rng;

const STEP: f64 = 1e-3;

/// Passes when the looser of rel. 1e-3 / abs. 1e-4 holds.
pub fn close(analytic: f32, numeric: f64) -> bool {
    let abs = (analytic as f64 - numeric).abs();
    abs <= 1e-4 || abs <= 1e-3 * (analytic as f64).abs().max(numeric.abs())
}

pub fn random_tensor(shape: &[usize], lo: f32, hi: f32, r: &mut rng::Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Double-precision reference forward pass, written independently of the
/// tape. It also records every relu sign and max-pool winner so that a
/// perturbation crossing a kink can be recognised: finite differences say
/// nothing about the derivative there.
pub mod reference {
    use super::Tensor;

    #[derive(Debug, Clone)]
    pub struct T {
        pub shape: Vec<usize>,
        pub d: Vec<f64>,
    }

    impl T {
        pub fn of(t: &Tensor) -> T {
            T { shape: t.shape().to_vec(), d: t.data().iter().map(|&v| v as f64).collect() }
        }
        fn map(&self, f: impl Fn(f64) -> f64) -> T {
            T { shape: self.shape.clone(), d: self.d.iter().map(|&v| f(v)).collect() }
        }
        pub fn zip(&self, o: &T, f: impl Fn(f64, f64) -> f64) -> T {
            if o.d.len() == 1 {
                return self.map(|v| f(v, o.d[0]));
            }
            assert_eq!(self.shape, o.shape);
            T { shape: self.shape.clone(), d: self.d.iter().zip(&o.d).map(|(&a, &b)| f(a, b)).collect() }
        }
    }

    #[derive(Default)]
    pub struct Kinks(pub Vec<u32>);

    pub fn exp(x: &T) -> T {
        x.map(f64::exp)
    }
    pub fn relu(x: &T, k: &mut Kinks) -> T {
        k.0.extend(x.d.iter().map(|&v| (v > 0.0) as u32));
        x.map(|v| v.max(0.0))
    }
    pub fn mean(x: &T) -> T {
        T { shape: vec![], d: vec![x.d.iter().sum::<f64>() / x.d.len() as f64] }
    }
    pub fn matmul(a: &T, b: &T) -> T {
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        assert_eq!(b.shape[0], k);
        let mut d = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                d[i * n + j] = (0..k).map(|t| a.d[i * k + t] * b.d[t * n + j]).sum();
            }
        }
        T { shape: vec![m, n], d }
    }
    pub fn row_bias(x: &T, b: &T) -> T {
        let c = x.shape[1];
        T { shape: x.shape.clone(), d: x.d.iter().enumerate().map(|(i, &v)| v + b.d[i % c]).collect() }
    }
    pub fn log_softmax(x: &T) -> T {
        let c = x.shape[1];
        let mut d = x.d.clone();
        for row in d.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        T { shape: x.shape.clone(), d }
    }
    pub fn softmax(x: &T) -> T {
        log_softmax(x).map(f64::exp)
    }
    /// Batch statistics, biased variance, over every axis but 1.
    pub fn batch_norm(x: &T, g: &T, b: &T, eps: f64) -> T {
        let (n, c) = (x.shape[0], x.shape[1]);
        let sp: usize = x.shape[2..].iter().product();
        let mut d = x.d.clone();
        for ch in 0..c {
            let idx = || (0..n).flat_map(move |i| (0..sp).map(move |s| (i * c + ch) * sp + s));
            let cnt = (n * sp) as f64;
            let mu = idx().map(|i| x.d[i]).sum::<f64>() / cnt;
            let var = idx().map(|i| (x.d[i] - mu).powi(2)).sum::<f64>() / cnt;
            for i in idx() {
                d[i] = g.d[ch] * (x.d[i] - mu) / (var + eps).sqrt() + b.d[ch];
            }
        }
        T { shape: x.shape.clone(), d }
    }
    pub fn conv2d(x: &T, k: &T, stride: usize, pad: usize) -> T {
        let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (o, kh, kw) = (k.shape[0], k.shape[2], k.shape[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut d = vec![0.0; b * o * oh * ow];
        for n in 0..b {
            for f in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = 0.0;
                        for ch in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                                        s += x.d[((n * c + ch) * h + iy as usize) * w + ix as usize]
                                            * k.d[((f * c + ch) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        d[((n * o + f) * oh + y) * ow + xx] = s;
                    }
                }
            }
        }
        T { shape: vec![b, o, oh, ow], d }
    }
    pub fn max_pool2(x: &T, k: &mut Kinks) -> T {
        let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut d = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let at = |dy: usize, dx: usize| plane * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                    let mut best = at(0, 0);
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        if x.d[at(dy, dx)] > x.d[best] {
                            best = at(dy, dx);
                        }
                    }
                    k.0.push(best as u32);
                    d.push(x.d[best]);
                }
            }
        }
        T { shape: vec![b, c, oh, ow], d }
    }
}

pub use reference::{Kinks, T};

/// Central-difference derivative of a scalar function given by the
/// reference, combined over steps `STEP` and `STEP / 2` (Richardson) so the
/// truncation error is fourth order. `None` when any probe changes the
/// relu / max-pool pattern.
pub fn numeric_derivative(mut f: impl FnMut(f64, &mut Kinks) -> f64) -> Option<f64> {
    let mut base = Kinks::default();
    f(0.0, &mut base);
    numeric_derivative_from(&base, f)
}

/// As [`numeric_derivative`], with the unperturbed pattern already known.
pub fn numeric_derivative_from(base: &Kinks, mut f: impl FnMut(f64, &mut Kinks) -> f64) -> Option<f64> {
    let mut probe = |h: f64| {
        let mut k = Kinks::default();
        let v = f(h, &mut k);
        (k.0 == base.0).then_some(v)
    };
    let coarse = (probe(STEP)? - probe(-STEP)?) / (2.0 * STEP);
    let fine = (probe(STEP / 2.0)? - probe(-STEP / 2.0)?) / STEP;
    Some((4.0 * fine - coarse) / 3.0)
}

pub fn weighted_sum(y: &T, w: &Tensor) -> f64 {
    assert_eq!(y.d.len(), w.numel());
    y.d.iter().zip(w.data()).map(|(&a, &b)| a * b as f64).sum()
}

/// A tiny straight-line program over a `[B×C]` activation.
#[derive(Debug, Clone, Copy)]
pub enum Step {
    AddParam,
    SubParam,
    MulParam,
    DivExpParam,
    Scale(f32),
    Shift(f32),
    Relu,
    ExpScaled,
    MatMul(usize),
    RowBias,
    Softmax,
    LogSoftmax,
    BatchNorm,
    MeanTimes,
}

/// Shapes of the parameter leaves a program needs, in creation order.
pub fn leaf_shapes(input: [usize; 2], steps: &[Step]) -> Vec<Vec<usize>> {
    let mut shapes = vec![input.to_vec()];
    let [b, mut c] = input;
    for s in steps {
        match *s {
            Step::AddParam | Step::SubParam | Step::MulParam | Step::DivExpParam => shapes.push(vec![b, c]),
            Step::MatMul(n) => {
                shapes.push(vec![c, n]);
                c = n;
            }
            Step::RowBias => shapes.push(vec![c]),
            Step::BatchNorm => {
                shapes.push(vec![c]);
                shapes.push(vec![c]);
            }
            _ => {}
        }
    }
    shapes
}

pub struct Built {
    pub out: Var,
    pub leaves: Vec<Var>,
}

pub fn build(tape: &mut Tape, steps: &[Step], values: &[Tensor]) -> Built {
    let mut leaves = Vec::new();
    let mut next = values.iter();
    let mut leaf = |tape: &mut Tape| {
        let v = tape.param(next.next().unwrap().clone());
        leaves.push(v);
        v
    };
    let mut x = leaf(tape);
    for s in steps {
        x = match *s {
            Step::AddParam => {
                let p = leaf(tape);
                tape.add(x, p).unwrap()
            }
            Step::SubParam => {
                let p = leaf(tape);
                tape.sub(x, p).unwrap()
            }
            Step::MulParam => {
                let p = leaf(tape);
                tape.mul(x, p).unwrap()
            }
            Step::DivExpParam => {
                let p = leaf(tape);
                let d = tape.exp(p);
                tape.div(x, d).unwrap()
            }
            Step::Scale(c) => tape.scale(x, c),
            Step::Shift(c) => tape.add_scalar(x, c),
            Step::Relu => tape.relu(x),
            Step::ExpScaled => {
                let y = tape.scale(x, 0.25);
                tape.exp(y)
            }
            Step::MatMul(_) => {
                let p = leaf(tape);
                tape.matmul(x, p).unwrap()
            }
            Step::RowBias => {
                let p = leaf(tape);
                tape.add_row_bias(x, p).unwrap()
            }
            Step::Softmax => tape.softmax(x).unwrap(),
            Step::LogSoftmax => tape.log_softmax(x).unwrap(),
            Step::BatchNorm => {
                let g = leaf(tape);
                let b = leaf(tape);
                tape.batch_norm(x, g, b, NormStats::Batch, 1e-5).unwrap()
            }
            Step::MeanTimes => {
                let m = tape.mean(x);
                tape.mul(x, m).unwrap()
            }
        };
    }
    Built { out: x, leaves }
}

/// The same program evaluated by the reference.
pub fn reference_eval(steps: &[Step], values: &[T], kinks: &mut Kinks) -> T {
    let mut next = values.iter();
    let mut x = next.next().unwrap().clone();
    for s in steps {
        x = match *s {
            Step::AddParam => x.zip(next.next().unwrap(), |a, b| a + b),
            Step::SubParam => x.zip(next.next().unwrap(), |a, b| a - b),
            Step::MulParam => x.zip(next.next().unwrap(), |a, b| a * b),
            Step::DivExpParam => x.zip(next.next().unwrap(), |a, b| a / b.exp()),
            Step::Scale(c) => x.zip(&T { shape: vec![], d: vec![c as f64] }, |a, b| a * b),
            Step::Shift(c) => x.zip(&T { shape: vec![], d: vec![c as f64] }, |a, b| a + b),
            Step::Relu => reference::relu(&x, kinks),
            Step::ExpScaled => reference::exp(&x.zip(&T { shape: vec![], d: vec![0.25] }, |a, b| a * b)),
            Step::MatMul(_) => reference::matmul(&x, next.next().unwrap()),
            Step::RowBias => reference::row_bias(&x, next.next().unwrap()),
            Step::Softmax => reference::softmax(&x),
            Step::LogSoftmax => reference::log_softmax(&x),
            Step::BatchNorm => {
                let g = next.next().unwrap();
                reference::batch_norm(&x, g, next.next().unwrap(), 1e-5)
            }
            Step::MeanTimes => x.zip(&reference::mean(&x), |a, b| a * b),
        };
    }
    x
}

/// Checks every leaf entry not sitting on a kink; returns how many were
/// checked, or the first mismatch.
pub fn check_program(steps: &[Step], values: &[Tensor], weights_seed: u64) -> Result<usize, String> {
    let mut tape = Tape::new();
    let built = build(&mut tape, steps, values);
    let out_shape = tape.value(built.out).shape().to_vec();
    let w = random_tensor(&out_shape, -1.0, 1.0, &mut rng::seeded(weights_seed));
    let wv = tape.constant(w.clone());
    let prod = tape.mul(built.out, wv).unwrap();
    let loss = tape.sum(prod);
    let leaves = built.leaves.clone();
    let grads = tape.backward(loss).unwrap();

    let exact: Vec<T> = values.iter().map(T::of).collect();
    let mut checked = 0;
    for (li, &leaf) in leaves.iter().enumerate() {
        let g = grads.get(leaf).ok_or_else(|| format!("leaf {li} has no gradient"))?;
        for e in 0..values[li].numel() {
            let numeric = numeric_derivative(|h, k| {
                let mut v = exact.clone();
                v[li].d[e] += h;
                weighted_sum(&reference_eval(steps, &v, k), &w)
            });
            let Some(numeric) = numeric else { continue };
            if !close(g.data()[e], numeric) {
                return Err(format!("leaf {li} entry {e}: analytic {} vs numeric {numeric}", g.data()[e]));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

pub fn program_values(shapes: &[Vec<usize>], seed: u64) -> Vec<Tensor> {
    let mut r = rng::seeded(seed);
    shapes.iter().map(|s| random_tensor(s, -2.0, 2.0, &mut r)).collect()
}

/// Direct f32 convolution: one output at a time, channel-major, then kernel
/// rows, then kernel columns, starting from zero.
pub fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f32; b * o * oh * ow];
    for n in 0..b {
        for f in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0f32;
                    for ch in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    0.0
                                } else {
                                    x.data()[((n * c + ch) * h + iy as usize) * w + ix as usize]
                                };
                                s += v * k.data()[((f * c + ch) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((n * o + f) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    Tensor::new(&[b, o, oh, ow], out).unwrap()
}

/// One cnn-small block on the reference: conv3×3(pad 1) → batch norm
/// (batch statistics) → relu → max-pool 2.
fn reference_block(a: &T, w: &T, g: &T, b: &T, k: &mut Kinks) -> T {
    let a = reference::conv2d(a, w, 1, 1);
    let a = reference::batch_norm(&a, g, b, 1e-5);
    let a = reference::relu(&a, k);
    reference::max_pool2(&a, k)
}

/// cnn-small from block `from` on (0..=3, where 3 is the linear head),
/// given that block's input. `p` holds the parameters in model order:
/// three (conv, gamma, beta) triples, then head weight and bias.
fn reference_cnn_small_from(from: usize, input: &T, p: &[T], k: &mut Kinks) -> T {
    let mut a = input.clone();
    for block in from..3 {
        a = reference_block(&a, &p[3 * block], &p[3 * block + 1], &p[3 * block + 2], k);
    }
    let n = a.shape[0];
    let flat = T { shape: vec![n, a.d.len() / n], d: a.d };
    reference::row_bias(&reference::matmul(&flat, &p[9]), &p[10])
}

pub fn reference_cnn_small(x: &T, p: &[T], k: &mut Kinks) -> T {
    reference_cnn_small_from(0, x, p, k)
}

/// Outcome of checking every cnn-small parameter gradient.
#[derive(Debug)]
pub struct CnnCheck {
    pub scalars: usize,
    pub checked: usize,
    pub on_kink: usize,
    pub failures: Vec<String>,
}

/// Every parameter gradient of a 4-class cnn-small (perturbed norm affines,
/// batch of 2, current-batch statistics) against finite differences of the
/// reference. Perturbing a parameter of block `b` leaves the inputs of
/// blocks `..=b` unchanged, so those are computed once.
pub fn check_cnn_small(seed: u64) -> Result<CnnCheck, String> {
    let mut model = build_model("cnn-small", 4, seed).map_err(|e| e.to_string())?;
    let mut r = rng::seeded(seed ^ 0x5eed);
    for p in model.parameters_mut().iter_mut().filter(|p| p.is_norm_affine) {
        for v in p.value.data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    let x = random_tensor(&[2, 1, 16, 16], 0.0, 1.0, &mut r);
    let w = random_tensor(&[2, 4], -1.0, 1.0, &mut r);

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let traced = model.trace(&mut tape, xv, StatsMode::UseCurrentBatch, Some(ParamFilter::All)).map_err(|e| e.to_string())?;
    let wv = tape.constant(w.clone());
    let p = tape.mul(traced.logits, wv).map_err(|e| e.to_string())?;
    let loss = tape.sum(p);
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;
    let pg = traced.param_grads(&model, grads);

    let params: Vec<T> = model.parameters().iter().map(|p| T::of(&p.value)).collect();
    if params.len() != 11 {
        return Err(format!("expected 11 cnn-small parameters, got {}", params.len()));
    }
    // block inputs and the kink pattern recorded before each block
    let mut inputs = vec![T::of(&x)];
    let mut kinks_before = vec![0];
    let mut base = Kinks::default();
    for block in 0..3 {
        let next = reference_block(&inputs[block], &params[3 * block], &params[3 * block + 1], &params[3 * block + 2], &mut base);
        inputs.push(next);
        kinks_before.push(base.0.len());
    }
    // the reference and the model agree on the forward pass first
    let logits = model.forward(&x, StatsMode::UseCurrentBatch).map_err(|e| e.to_string())?;
    let ref_logits = reference_cnn_small(&inputs[0], &params, &mut Kinks::default());
    for (a, b) in logits.data().iter().zip(&ref_logits.d) {
        if (*a as f64 - b).abs() >= 1e-4 {
            return Err(format!("forward {a} vs reference {b}"));
        }
    }

    let mut out = CnnCheck { scalars: model.num_scalars(), checked: 0, on_kink: 0, failures: Vec::new() };
    for pi in 0..params.len() {
        let from = (pi / 3).min(3);
        let suffix = Kinks(base.0[kinks_before[from]..].to_vec());
        let g = pg.get(pi).ok_or_else(|| format!("no gradient for parameter {pi}"))?;
        let mut v = params.clone();
        for e in 0..g.numel() {
            let numeric = numeric_derivative_from(&suffix, |h, k| {
                v[pi].d[e] = params[pi].d[e] + h;
                weighted_sum(&reference_cnn_small_from(from, &inputs[from], &v, k), &w)
            });
            v[pi].d[e] = params[pi].d[e];
            match numeric {
                None => out.on_kink += 1,
                Some(n) if !close(g.data()[e], n) => {
                    out.failures.push(format!("{}[{e}]: {} vs {n}", model.parameters()[pi].name, g.data()[e]))
                }
                Some(_) => out.checked += 1,
            }
        }
    }
    Ok(out)
}
