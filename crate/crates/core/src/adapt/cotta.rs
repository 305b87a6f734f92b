use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::{augment, AdaptConfig, AdaptState, PredictFrom, StepOutput};
use crate::error::{contract_err, shape_err, Result};
use crate::nn::{ModelState, ParamFilter};
use crate::rng::Rng;
use crate::stream::Batch;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Soft cross-entropy `−(1/B) Σ_b Σ_c target_bc · log softmax(logits)_bc`.
/// `target` enters the tape as a constant, so no gradient reaches it.
pub fn consistency_loss(tape: &mut Tape, target: &Tensor, student_logits: Var) -> Result<Var> {
    let ls = tape.value(student_logits).shape();
    if target.shape() != ls {
        return Err(shape_err!("pseudo-label shape {:?} does not match logits {:?}", target.shape(), ls));
    }
    let b = ls[0];
    let t = tape.constant(target.clone());
    let logp = tape.log_softmax(student_logits)?;
    let prod = tape.mul(logp, t)?;
    let total = tape.sum(prod);
    Ok(tape.scale(total, -1.0 / b as f32))
}

/// `teacher ← α·teacher + (1−α)·student` on every parameter (norm affine
/// included). Running statistics are copied from the student.
pub fn ema_update(teacher: &mut ModelState, student: &ModelState, alpha: f32) -> Result<()> {
    teacher.check_compatible(student)?;
    let beta = 1.0 - alpha;
    for (t, s) in teacher.parameters_mut().iter_mut().zip(student.parameters()) {
        for (tv, &sv) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            *tv = alpha * *tv + beta * sv;
        }
    }
    teacher.restore_buffers_from(student);
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    /// `[B×K]`, rows sum to 1.
    pub probs: Tensor,
    /// The pseudo-labelling model's direct prediction on the clean batch.
    pub direct: Tensor,
    /// Max softmax probability of the source model per item.
    pub source_confidence: Vec<f32>,
    pub used_augmentation: Vec<bool>,
}

/// Per item: the teacher's direct prediction when the source model is at
/// least `p_th` confident, otherwise the mean teacher prediction over
/// `n_aug` random augmentations of the item.
///
/// With weight averaging disabled the student stands in for the teacher;
/// with augmentation averaging disabled the direct branch is always taken.
pub fn refined_pseudo_label(
    state: &mut AdaptState,
    batch: &Batch,
    cfg: &AdaptConfig,
) -> Result<PseudoLabel> {
    let labeler = if cfg.enable_weight_avg { &state.teacher } else { &state.student };
    let images = &batch.images;
    let direct = labeler.predict_proba(images, cfg.adapt_stats)?;
    let source_confidence = state.source.predict_proba(images, cfg.source_conf_stats)?.max_rows();
    let gated: Vec<bool> = source_confidence.iter().map(|&c| c < cfg.p_th || c.is_nan()).collect();
    if !cfg.enable_aug_avg || !gated.iter().any(|&g| g) {
        let used_augmentation = vec![false; gated.len()];
        return Ok(PseudoLabel { probs: direct.clone(), direct, source_confidence, used_augmentation });
    }
    if cfg.n_aug == 0 {
        return Err(contract_err!("augmentation averaging needs n_aug >= 1"));
    }
    let mut acc = vec![0.0f32; direct.numel()];
    for _ in 0..cfg.n_aug {
        let aug = augment(images, &cfg.augment, &mut state.rng)?;
        let p = labeler.predict_proba(&aug, cfg.adapt_stats)?;
        for (a, &v) in acc.iter_mut().zip(p.data()) {
            *a += v;
        }
    }
    let k = direct.shape()[1];
    let inv = 1.0 / cfg.n_aug as f32;
    let mut out = direct.data().to_vec();
    for (i, &g) in gated.iter().enumerate() {
        if g {
            for c in 0..k {
                out[i * k + c] = acc[i * k + c] * inv;
            }
        }
    }
    let probs = Tensor::new(direct.shape(), out)?;
    Ok(PseudoLabel { probs, direct, source_confidence, used_augmentation: gated })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RestoreReport {
    pub restored: usize,
    pub total: usize,
}

impl RestoreReport {
    pub fn fraction(&self) -> f32 {
        if self.total == 0 {
            0.0
        } else {
            (self.restored as f64 / self.total as f64) as f32
        }
    }
}

/// Draws a fresh Bernoulli(`p`) mask per element of every parameter in
/// `scope` and copies the source value wherever the mask is 1.
pub fn stochastic_restore(
    student: &mut ModelState,
    source: &ModelState,
    p: f64,
    scope: ParamFilter,
    rng: &mut Rng,
) -> Result<RestoreReport> {
    student.check_compatible(source)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(contract_err!("restore probability {} outside [0, 1]", p));
    }
    let mut report = RestoreReport { restored: 0, total: 0 };
    for (w, w0) in student.parameters_mut().iter_mut().zip(source.parameters()) {
        if !scope.admits(w) {
            continue;
        }
        for (v, &v0) in w.value.data_mut().iter_mut().zip(w0.value.data()) {
            if rng.random_bool(p) {
                *v = v0;
                report.restored += 1;
            }
        }
        report.total += w.value.numel();
    }
    Ok(report)
}

/// One online step: pseudo-label, student update on all parameters,
/// teacher EMA, stochastic restore. Returns the online prediction.
pub fn cotta_step(state: &mut AdaptState, batch: &Batch, cfg: &AdaptConfig) -> Result<StepOutput> {
    let pl = refined_pseudo_label(state, batch, cfg)?;
    let target = if cfg.hard_pseudo_labels { one_hot_argmax(&pl.probs) } else { pl.probs.clone() };

    let mut tape = Tape::new();
    let x = tape.constant(batch.images.clone());
    let traced = state.student.trace(&mut tape, x, cfg.adapt_stats, Some(ParamFilter::All))?;
    let loss = consistency_loss(&mut tape, &target, traced.logits)?;
    let loss_value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    let mut pg = traced.param_grads(&state.student, grads);
    state.optimizer.step(&mut state.student, &mut pg, ParamFilter::All)?;

    if cfg.enable_weight_avg {
        ema_update(&mut state.teacher, &state.student, cfg.alpha)?;
    }
    let restored_frac = if cfg.enable_restore {
        let r = stochastic_restore(&mut state.student, &state.source, cfg.restore_p, cfg.restore_scope, &mut state.rng)?;
        Some(r.fraction())
    } else {
        None
    };
    state.step_counter += 1;

    let aug_frac = pl.used_augmentation.iter().filter(|&&u| u).count() as f32 / pl.used_augmentation.len() as f32;
    let probs = match cfg.predict_from {
        PredictFrom::Refined => pl.probs,
        PredictFrom::TeacherDirect => pl.direct,
    };
    Ok(StepOutput { probs, loss: Some(loss_value), restored_frac, aug_frac: Some(aug_frac) })
}

pub(crate) fn one_hot_argmax(probs: &Tensor) -> Tensor {
    let k = probs.shape()[1];
    let mut out = vec![0.0; probs.numel()];
    for (i, c) in probs.argmax_rows().into_iter().enumerate() {
        out[i * k + c] = 1.0;
    }
    Tensor::new(probs.shape(), out).expect("same shape")
}
