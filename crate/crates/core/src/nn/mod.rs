//! Small classifiers, batch normalization, Adam and parameter snapshots.
//!
//! A [`ModelState`] is plain data: an ordered list of named parameters plus
//! running statistics for each batch-norm layer. The layer graph is derived
//! from the architecture id, so two states with the same id always line up
//! parameter by parameter.

mod optim;
mod train;

pub use optim::{AdamConfig, AdamState};
pub use train::{cross_entropy_hard, error_rate, pretrain, PretrainConfig, PretrainReport};

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng as _;

use crate::error::{config_err, contract_err, shape_err, Error, Result};
use crate::math;
use crate::rng;
use crate::tape::{Gradients, NormStats, Tape, Var};
use crate::tensor::Tensor;

/// Input contract shared by both architectures: one 16×16 channel.
pub const INPUT_SHAPE: [usize; 3] = [1, 16, 16];
pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    MlpSmall,
    CnnSmall,
}

impl Architecture {
    pub const ALL: [Architecture; 2] = [Architecture::MlpSmall, Architecture::CnnSmall];

    pub fn id(self) -> &'static str {
        match self {
            Architecture::MlpSmall => "mlp-small",
            Architecture::CnnSmall => "cnn-small",
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.id() == s)
            .ok_or_else(|| config_err!("unknown architecture `{}` (expected mlp-small or cnn-small)", s))
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// How batch-norm layers pick their normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StatsMode {
    /// Stored running statistics (ordinary inference).
    UseRunning,
    /// Statistics of the batch being processed. Running buffers are never
    /// written in this mode; see [`ModelState::update_running_stats`].
    UseCurrentBatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// True exactly for batch-norm scale (γ) and shift (β).
    pub is_norm_affine: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnBuffers {
    pub layer: String,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

/// Which parameters an update may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamFilter {
    All,
    NormAffine,
}

impl ParamFilter {
    pub fn admits(self, p: &Parameter) -> bool {
        match self {
            ParamFilter::All => true,
            ParamFilter::NormAffine => p.is_norm_affine,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layer {
    Conv { weight: usize },
    Norm { gamma: usize, beta: usize, buffers: usize },
    Relu,
    MaxPool,
    Flatten,
    Linear { weight: usize, bias: Option<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    architecture: Architecture,
    num_classes: usize,
    parameters: Vec<Parameter>,
    bn_buffers: Vec<BnBuffers>,
    layers: Vec<Layer>,
    seed: u64,
}

struct Builder {
    params: Vec<Parameter>,
    buffers: Vec<BnBuffers>,
    layers: Vec<Layer>,
}

impl Builder {
    fn he_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut rng::Rng) -> usize {
        let bound = math::sqrt(6.0 / fan_in as f32);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.params.push(Parameter {
            name: name.to_string(),
            value: Tensor::new(shape, data).unwrap(),
            is_norm_affine: false,
        });
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, out_c: usize, in_c: usize, rng: &mut rng::Rng) {
        let weight = self.he_uniform(&alloc::format!("{name}.weight"), &[out_c, in_c, 3, 3], in_c * 9, rng);
        self.layers.push(Layer::Conv { weight });
    }

    fn norm(&mut self, name: &str, channels: usize) {
        let mut push = |suffix: &str, v: f32| {
            self.params.push(Parameter {
                name: alloc::format!("{name}.{suffix}"),
                value: Tensor::full(&[channels], v),
                is_norm_affine: true,
            });
            self.params.len() - 1
        };
        let gamma = push("weight", 1.0);
        let beta = push("bias", 0.0);
        self.buffers.push(BnBuffers {
            layer: name.to_string(),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        });
        self.layers.push(Layer::Norm { gamma, beta, buffers: self.buffers.len() - 1 });
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize, bias: bool, rng: &mut rng::Rng) {
        let weight = self.he_uniform(&alloc::format!("{name}.weight"), &[inp, out], inp, rng);
        let bias = bias.then(|| {
            self.params.push(Parameter {
                name: alloc::format!("{name}.bias"),
                value: Tensor::zeros(&[out]),
                is_norm_affine: false,
            });
            self.params.len() - 1
        });
        self.layers.push(Layer::Linear { weight, bias });
    }
}

/// Builds a freshly initialized model: He-uniform weights, zero biases,
/// γ = 1, β = 0, running mean 0 and running variance 1.
///
/// `cnn-small` is three `conv3×3 → BN → ReLU → maxpool2` stages (8, 16, 32
/// channels) and a linear head; `mlp-small` is two `linear → BN → ReLU`
/// hidden layers of width 64 and a linear head.
pub fn build_model(architecture_id: &str, num_classes: usize, seed: u64) -> Result<ModelState> {
    let architecture: Architecture = architecture_id.parse()?;
    ModelState::build(architecture, num_classes, seed)
}

impl ModelState {
    pub fn build(architecture: Architecture, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(config_err!("num_classes must be at least 2, got {}", num_classes));
        }
        let mut rng = rng::seeded(seed);
        let mut b = Builder { params: Vec::new(), buffers: Vec::new(), layers: Vec::new() };
        match architecture {
            Architecture::CnnSmall => {
                let widths = [8, 16, 32];
                let mut in_c = INPUT_SHAPE[0];
                for (i, &w) in widths.iter().enumerate() {
                    b.conv(&alloc::format!("conv{}", i + 1), w, in_c, &mut rng);
                    b.norm(&alloc::format!("bn{}", i + 1), w);
                    b.layers.push(Layer::Relu);
                    b.layers.push(Layer::MaxPool);
                    in_c = w;
                }
                b.layers.push(Layer::Flatten);
                let spatial = (INPUT_SHAPE[1] >> widths.len()) * (INPUT_SHAPE[2] >> widths.len());
                b.linear("head", in_c * spatial, num_classes, true, &mut rng);
            }
            Architecture::MlpSmall => {
                let mut inp: usize = INPUT_SHAPE.iter().product();
                b.layers.push(Layer::Flatten);
                for i in 1..=2 {
                    b.linear(&alloc::format!("fc{i}"), inp, 64, false, &mut rng);
                    b.norm(&alloc::format!("bn{i}"), 64);
                    b.layers.push(Layer::Relu);
                    inp = 64;
                }
                b.linear("head", inp, num_classes, true, &mut rng);
            }
        }
        Ok(ModelState {
            architecture,
            num_classes,
            parameters: b.params,
            bn_buffers: b.buffers,
            layers: b.layers,
            seed,
        })
    }

    /// Reassembles a state from stored parts, checking names and shapes
    /// against the architecture's layout.
    pub fn from_parts(
        architecture_id: &str,
        num_classes: usize,
        seed: u64,
        parameters: Vec<Parameter>,
        bn_buffers: Vec<BnBuffers>,
    ) -> Result<Self> {
        let mut m = build_model(architecture_id, num_classes, seed)?;
        if parameters.len() != m.parameters.len() || bn_buffers.len() != m.bn_buffers.len() {
            return Err(contract_err!(
                "{} with {} classes expects {} parameters and {} norm buffers, got {} and {}",
                architecture_id,
                num_classes,
                m.parameters.len(),
                m.bn_buffers.len(),
                parameters.len(),
                bn_buffers.len()
            ));
        }
        for (want, got) in m.parameters.iter().zip(&parameters) {
            if want.name != got.name
                || want.value.shape() != got.value.shape()
                || want.is_norm_affine != got.is_norm_affine
            {
                return Err(contract_err!(
                    "parameter mismatch: expected {} {:?}, got {} {:?}",
                    want.name,
                    want.value.shape(),
                    got.name,
                    got.value.shape()
                ));
            }
        }
        for (want, got) in m.bn_buffers.iter().zip(&bn_buffers) {
            if want.layer != got.layer
                || want.running_mean.len() != got.running_mean.len()
                || want.running_var.len() != got.running_var.len()
            {
                return Err(contract_err!("norm buffer mismatch for layer {}", want.layer));
            }
        }
        m.parameters = parameters;
        m.bn_buffers = bn_buffers;
        Ok(m)
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn architecture_id(&self) -> &'static str {
        self.architecture.id()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Seed the initial weights were drawn from (provenance only).
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.parameters
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.parameters
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn bn_buffers(&self) -> &[BnBuffers] {
        &self.bn_buffers
    }

    pub fn num_scalars(&self) -> usize {
        self.parameters.iter().map(|p| p.value.numel()).sum()
    }

    /// A value-equal copy sharing no storage with `self`.
    pub fn snapshot(&self) -> ModelState {
        self.clone()
    }

    /// Overwrites every parameter and buffer with `snapshot`'s.
    pub fn restore_into(&mut self, snapshot: &ModelState) -> Result<()> {
        self.check_compatible(snapshot)?;
        for (dst, src) in self.parameters.iter_mut().zip(&snapshot.parameters) {
            dst.value.data_mut().copy_from_slice(src.value.data());
        }
        for (dst, src) in self.bn_buffers.iter_mut().zip(&snapshot.bn_buffers) {
            dst.running_mean.copy_from_slice(&src.running_mean);
            dst.running_var.copy_from_slice(&src.running_var);
        }
        Ok(())
    }

    /// Copies running statistics only.
    pub fn restore_buffers_from(&mut self, other: &ModelState) {
        for (dst, src) in self.bn_buffers.iter_mut().zip(&other.bn_buffers) {
            dst.running_mean.copy_from_slice(&src.running_mean);
            dst.running_var.copy_from_slice(&src.running_var);
        }
    }

    pub fn check_compatible(&self, other: &ModelState) -> Result<()> {
        if self.architecture != other.architecture || self.num_classes != other.num_classes {
            return Err(contract_err!(
                "architecture mismatch: {} ({} classes) vs {} ({} classes)",
                self.architecture,
                self.num_classes,
                other.architecture,
                other.num_classes
            ));
        }
        Ok(())
    }

    /// Bitwise equality of every parameter and buffer.
    pub fn bits_eq(&self, other: &ModelState) -> bool {
        let f = |a: &[f32], b: &[f32]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        self.architecture == other.architecture
            && self.parameters.len() == other.parameters.len()
            && self.parameters.iter().zip(&other.parameters).all(|(a, b)| a.name == b.name && a.value.bits_eq(&b.value))
            && self.bn_buffers.iter().zip(&other.bn_buffers).all(|(a, b)| {
                f(&a.running_mean, &b.running_mean) && f(&a.running_var, &b.running_var)
            })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != INPUT_SHAPE {
            return Err(shape_err!(
                "{} expects input [B, {}, {}, {}], got {:?}",
                self.architecture,
                INPUT_SHAPE[0],
                INPUT_SHAPE[1],
                INPUT_SHAPE[2],
                shape
            ));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`. Parameters admitted by
    /// `trainable` become gradient leaves, the rest constants.
    pub fn trace(
        &self,
        tape: &mut Tape,
        input: Var,
        mode: StatsMode,
        trainable: Option<ParamFilter>,
    ) -> Result<Traced> {
        self.check_input(tape.value(input).shape())?;
        let params: Vec<Var> = self
            .parameters
            .iter()
            .map(|p| match trainable {
                Some(f) if f.admits(p) => tape.param(p.value.clone()),
                _ => tape.constant(p.value.clone()),
            })
            .collect();
        let mut norm_nodes = Vec::with_capacity(self.bn_buffers.len());
        let mut x = input;
        for layer in &self.layers {
            x = match *layer {
                Layer::Conv { weight } => tape.conv2d(x, params[weight], 1, 1)?,
                Layer::Norm { gamma, beta, buffers } => {
                    let buf = &self.bn_buffers[buffers];
                    let stats = match mode {
                        StatsMode::UseCurrentBatch => NormStats::Batch,
                        StatsMode::UseRunning => NormStats::Fixed {
                            mean: &buf.running_mean,
                            var: &buf.running_var,
                        },
                    };
                    let y = tape.batch_norm(x, params[gamma], params[beta], stats, BN_EPS)?;
                    norm_nodes.push(y);
                    y
                }
                Layer::Relu => tape.relu(x),
                Layer::MaxPool => tape.max_pool2d(x, 2)?,
                Layer::Flatten => {
                    let s = tape.value(x).shape();
                    let (b, rest) = (s[0], s[1..].iter().product::<usize>());
                    tape.reshape(x, &[b, rest])?
                }
                Layer::Linear { weight, bias } => {
                    let y = tape.matmul(x, params[weight])?;
                    match bias {
                        Some(b) => tape.add_row_bias(y, params[b])?,
                        None => y,
                    }
                }
            };
        }
        Ok(Traced { logits: x, params, norm_nodes, trainable })
    }

    /// Logits for `batch` without recording gradients.
    pub fn forward(&self, batch: &Tensor, mode: StatsMode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let t = self.trace(&mut tape, x, mode, None)?;
        Ok(tape.value(t.logits).clone())
    }

    /// Class probabilities for `batch`.
    pub fn predict_proba(&self, batch: &Tensor, mode: StatsMode) -> Result<Tensor> {
        crate::tape::softmax_rows(&self.forward(batch, mode)?)
    }

    /// Folds the batch statistics of a traced `UseCurrentBatch` pass into
    /// the running buffers (`running ← (1−m)·running + m·batch`, unbiased
    /// batch variance). Only pretraining calls this.
    pub fn update_running_stats(&mut self, tape: &Tape, traced: &Traced) -> Result<()> {
        if traced.norm_nodes.len() != self.bn_buffers.len() {
            return Err(contract_err!("trace does not belong to this model"));
        }
        for (buf, &node) in self.bn_buffers.iter_mut().zip(&traced.norm_nodes) {
            let (mean, var) = tape
                .batch_stats(node)
                .ok_or_else(|| contract_err!("norm layer {} did not use batch statistics", buf.layer))?;
            let shape = tape.value(node).shape();
            let n = (shape[0] * shape[2..].iter().product::<usize>()) as f32;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for c in 0..mean.len() {
                buf.running_mean[c] = (1.0 - BN_MOMENTUM) * buf.running_mean[c] + BN_MOMENTUM * mean[c];
                buf.running_var[c] = (1.0 - BN_MOMENTUM) * buf.running_var[c] + BN_MOMENTUM * var[c] * unbias;
            }
        }
        Ok(())
    }
}

/// A forward pass recorded on a tape.
#[derive(Debug, Clone)]
pub struct Traced {
    pub logits: Var,
    /// One node per model parameter, in model order.
    pub params: Vec<Var>,
    norm_nodes: Vec<Var>,
    trainable: Option<ParamFilter>,
}

impl Traced {
    /// Pulls the gradients of the trainable parameters out of `grads`.
    pub fn param_grads(&self, model: &ModelState, mut grads: Gradients) -> ParamGrads {
        let slots = self
            .params
            .iter()
            .zip(model.parameters())
            .map(|(&v, p)| match self.trainable {
                Some(f) if f.admits(p) => grads.take(v),
                _ => None,
            })
            .collect();
        ParamGrads { slots }
    }
}

/// Gradient slots aligned with a model's parameter list.
#[derive(Debug, Clone, Default)]
pub struct ParamGrads {
    slots: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn get(&self, index: usize) -> Option<&Tensor> {
        self.slots.get(index).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    #[cfg(test)]
    pub(crate) fn from_slots(slots: Vec<Option<Tensor>>) -> Self {
        Self { slots }
    }

    pub(crate) fn take(&mut self, index: usize) -> Option<Tensor> {
        self.slots.get_mut(index).and_then(Option::take)
    }

    pub fn clear(&mut self) {
        self.slots.iter_mut().for_each(|s| *s = None);
    }
}
