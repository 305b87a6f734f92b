use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::{AdamConfig, AdamState, ModelState, ParamFilter, StatsMode};
use crate::adapt::{augment, AugmentPolicy};
use crate::error::{config_err, contract_err, Result};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `−(1/B) Σ_b log softmax(logits)_{b, label_b}` recorded on `tape`.
pub fn cross_entropy_hard(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    let (b, k) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(contract_err!("{} labels for a batch of {}", labels.len(), b));
    }
    let mut onehot = vec![0.0; b * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(contract_err!("label {} out of range for {} classes", l, k));
        }
        onehot[i * k + l] = 1.0;
    }
    let target = tape.constant(Tensor::new(&[b, k], onehot)?);
    let logp = tape.log_softmax(logits)?;
    let picked = tape.mul(logp, target)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / b as f32))
}

/// Fraction of rows whose argmax differs from the label.
pub fn error_rate(logits_or_probs: &Tensor, labels: &[usize]) -> f32 {
    let wrong = logits_or_probs
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, l)| p != l)
        .count();
    wrong as f32 / labels.len().max(1) as f32
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    /// Training-time data augmentation, applied to every training batch.
    pub augment: Option<AugmentPolicy>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 64, lr: 1e-3, seed: 0, augment: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f32>,
    /// Error on the held-out clean set, running statistics.
    pub test_error: f32,
}

/// Supervised cross-entropy training on clean labeled images with Adam.
/// Batch-norm layers train on batch statistics and accumulate running
/// statistics, which the returned model uses for ordinary inference.
pub fn pretrain(
    model: &mut ModelState,
    images: &Tensor,
    labels: &[usize],
    test_images: &Tensor,
    test_labels: &[usize],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    let n = labels.len();
    if n == 0 || images.shape()[0] != n {
        return Err(config_err!("pretraining needs a non-empty labeled dataset"));
    }
    if cfg.batch_size < 2 {
        return Err(config_err!("pretraining batch size must be at least 2"));
    }
    let per: usize = images.shape()[1..].iter().product();
    let mut opt = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::derived(cfg.seed, 0x7072_6574);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            // a trailing singleton would give degenerate batch statistics
            if chunk.len() < 2 {
                continue;
            }
            let mut data = Vec::with_capacity(chunk.len() * per);
            let mut y = Vec::with_capacity(chunk.len());
            for &i in chunk {
                data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
                y.push(labels[i]);
            }
            let mut shape = images.shape().to_vec();
            shape[0] = chunk.len();
            let mut batch = Tensor::new(&shape, data)?;
            if let Some(policy) = &cfg.augment {
                batch = augment(&batch, policy, &mut rng)?;
            }
            let mut tape = Tape::new();
            let x = tape.constant(batch);
            let traced = model.trace(&mut tape, x, StatsMode::UseCurrentBatch, Some(ParamFilter::All))?;
            let loss = cross_entropy_hard(&mut tape, traced.logits, &y)?;
            loss_sum += tape.value(loss).data()[0] as f64;
            batches += 1;
            model.update_running_stats(&tape, &traced)?;
            let grads = tape.backward(loss)?;
            let mut pg = traced.param_grads(model, grads);
            opt.step(model, &mut pg, ParamFilter::All)?;
        }
        epoch_losses.push((loss_sum / batches.max(1) as f64) as f32);
    }
    let test_error = evaluate_error(model, test_images, test_labels, 256)?;
    Ok(PretrainReport { epoch_losses, test_error })
}

/// Error rate with running statistics, evaluated in chunks.
pub(crate) fn evaluate_error(model: &ModelState, images: &Tensor, labels: &[usize], chunk: usize) -> Result<f32> {
    let per: usize = images.shape()[1..].iter().product();
    let mut wrong = 0usize;
    for start in (0..labels.len()).step_by(chunk) {
        let end = (start + chunk).min(labels.len());
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let x = Tensor::new(&shape, images.data()[start * per..end * per].to_vec())?;
        let logits = model.forward(&x, StatsMode::UseRunning)?;
        wrong += logits.argmax_rows().iter().zip(&labels[start..end]).filter(|(p, l)| p != l).count();
    }
    Ok(wrong as f32 / labels.len().max(1) as f32)
}
