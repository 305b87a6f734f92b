use super::cotta::{consistency_loss, one_hot_argmax};
use super::{AdaptConfig, AdaptState, StepOutput};
use crate::error::Result;
use crate::nn::{ParamFilter, StatsMode};
use crate::stream::Batch;
use crate::tape::{Tape, Var};

/// The pretrained model as-is, running statistics. Mutates nothing.
pub fn source_step(state: &mut AdaptState, batch: &Batch) -> Result<StepOutput> {
    let probs = state.source().predict_proba(&batch.images, StatsMode::UseRunning)?;
    Ok(StepOutput::prediction(probs))
}

/// Source weights with current-batch normalization statistics. Mutates
/// nothing.
pub fn bn_stats_step(state: &mut AdaptState, batch: &Batch) -> Result<StepOutput> {
    let probs = state.student.predict_proba(&batch.images, StatsMode::UseCurrentBatch)?;
    Ok(StepOutput::prediction(probs))
}

/// Mean per-item Shannon entropy of `softmax(logits)`.
pub fn entropy_loss(tape: &mut Tape, logits: Var) -> Result<Var> {
    let b = tape.value(logits).shape()[0];
    let p = tape.softmax(logits)?;
    let logp = tape.log_softmax(logits)?;
    let plogp = tape.mul(p, logp)?;
    let total = tape.sum(plogp);
    Ok(tape.scale(total, -1.0 / b as f32))
}

/// Entropy minimization over the norm-affine parameters. The prediction is
/// the student's softmax before the update.
pub fn tent_step(state: &mut AdaptState, batch: &Batch, cfg: &AdaptConfig) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.images.clone());
    let traced = state.student.trace(&mut tape, x, cfg.adapt_stats, Some(ParamFilter::NormAffine))?;
    let probs = crate::tape::softmax_rows(tape.value(traced.logits))?;
    let loss = entropy_loss(&mut tape, traced.logits)?;
    let loss_value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    let mut pg = traced.param_grads(&state.student, grads);
    state.optimizer.step(&mut state.student, &mut pg, ParamFilter::NormAffine)?;
    state.step_counter += 1;
    Ok(StepOutput { loss: Some(loss_value), ..StepOutput::prediction(probs) })
}

/// Hard pseudo-labels (argmax of the student's own prediction) fitted with
/// cross-entropy on the norm-affine parameters.
pub fn pseudo_label_step(state: &mut AdaptState, batch: &Batch, cfg: &AdaptConfig) -> Result<StepOutput> {
    pseudo_label_step_scoped(state, batch, cfg, ParamFilter::NormAffine)
}

/// [`pseudo_label_step`] over an arbitrary parameter set.
pub fn pseudo_label_step_scoped(
    state: &mut AdaptState,
    batch: &Batch,
    cfg: &AdaptConfig,
    scope: ParamFilter,
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.images.clone());
    let traced = state.student.trace(&mut tape, x, cfg.adapt_stats, Some(scope))?;
    let probs = crate::tape::softmax_rows(tape.value(traced.logits))?;
    let target = one_hot_argmax(&probs);
    let loss = consistency_loss(&mut tape, &target, traced.logits)?;
    let loss_value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    let mut pg = traced.param_grads(&state.student, grads);
    state.optimizer.step(&mut state.student, &mut pg, scope)?;
    state.step_counter += 1;
    Ok(StepOutput { loss: Some(loss_value), ..StepOutput::prediction(probs) })
}
