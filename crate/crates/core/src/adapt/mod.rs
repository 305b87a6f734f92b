//! Online test-time adaptation methods behind one interface.
//!
//! Every method implements [`OnlineMethod`]: it observes an unlabeled
//! [`Batch`], returns class probabilities for it, and only then updates its
//! own state. Predictions therefore never benefit from the batch they are
//! scored on.
//!
//! * `Source`: the frozen pretrained model with its running statistics.
//! * `BnStatsAdapt`: same weights, current-batch normalization statistics.
//! * `PseudoLabel`: hard self-labels, Adam on norm-affine parameters.
//! * `TentContinual`: entropy minimization on norm-affine parameters.
//! * `TentOnlineOracle`: as above, reset to the source model whenever the
//!   stream moves to a new segment (uses segment metadata a deployed model
//!   would not have).
//! * `Cotta`: EMA teacher, confidence-gated augmentation-averaged soft
//!   pseudo-labels, Adam on all student parameters, stochastic restoration.

pub mod augment;
mod baselines;
mod cotta;

pub use augment::{augment, AugmentPolicy};
pub use baselines::{
    bn_stats_step, entropy_loss, pseudo_label_step, pseudo_label_step_scoped, source_step, tent_step,
};
pub use cotta::{
    consistency_loss, cotta_step, ema_update, refined_pseudo_label, stochastic_restore, PseudoLabel,
    RestoreReport,
};

use alloc::string::String;
use core::fmt;
use core::str::FromStr;

use crate::error::{config_err, Error, Result};
use crate::nn::{AdamConfig, AdamState, ModelState, ParamFilter, StatsMode};
use crate::rng::{self, Rng};
use crate::stream::Batch;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Source,
    BnStatsAdapt,
    PseudoLabel,
    TentContinual,
    TentOnlineOracle,
    Cotta,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Source,
        Method::BnStatsAdapt,
        Method::PseudoLabel,
        Method::TentContinual,
        Method::TentOnlineOracle,
        Method::Cotta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Source => "source",
            Method::BnStatsAdapt => "bn_stats_adapt",
            Method::PseudoLabel => "pseudo_label",
            Method::TentContinual => "tent_continual",
            Method::TentOnlineOracle => "tent_online_oracle",
            Method::Cotta => "cotta",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| config_err!("unknown method `{}`", s))
    }
}

/// Which distribution a CoTTA step reports as its online prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PredictFrom {
    /// The gated, possibly augmentation-averaged pseudo-label.
    Refined,
    /// The teacher's direct prediction on the un-augmented batch.
    TeacherDirect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub method: Method,
    /// EMA smoothing factor: `teacher ← α·teacher + (1−α)·student`.
    pub alpha: f32,
    /// Per-element restore probability.
    pub restore_p: f64,
    /// Source-confidence threshold above which the direct teacher
    /// prediction is used. Values above 1 force augmentation everywhere.
    pub p_th: f32,
    pub n_aug: usize,
    pub lr: f32,
    pub enable_weight_avg: bool,
    pub enable_aug_avg: bool,
    pub enable_restore: bool,
    pub predict_from: PredictFrom,
    /// Normalization statistics for student and teacher passes.
    pub adapt_stats: StatsMode,
    /// Normalization statistics for the source-confidence pass.
    pub source_conf_stats: StatsMode,
    /// Parameters subject to stochastic restoration.
    pub restore_scope: ParamFilter,
    /// One-hot the pseudo-label before the consistency loss.
    pub hard_pseudo_labels: bool,
    pub augment: AugmentPolicy,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self::for_method(Method::Cotta)
    }
}

impl AdaptConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            alpha: 0.999,
            restore_p: 0.01,
            p_th: 0.92,
            n_aug: 32,
            lr: 1e-3,
            enable_weight_avg: true,
            enable_aug_avg: true,
            enable_restore: true,
            predict_from: PredictFrom::Refined,
            adapt_stats: StatsMode::UseCurrentBatch,
            source_conf_stats: StatsMode::UseCurrentBatch,
            restore_scope: ParamFilter::All,
            hard_pseudo_labels: false,
            augment: AugmentPolicy::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(config_err!("alpha must be in [0, 1], got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.restore_p) {
            return Err(config_err!("restore_p must be in [0, 1], got {}", self.restore_p));
        }
        if !(self.p_th >= 0.0 && self.p_th.is_finite()) {
            return Err(config_err!("p_th must be a finite value >= 0, got {}", self.p_th));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("lr must be positive, got {}", self.lr));
        }
        if self.method == Method::Cotta && self.enable_aug_avg && self.n_aug == 0 {
            return Err(config_err!(
                "n_aug = 0 with augmentation averaging enabled: set n_aug >= 1 or enable_aug_avg = false"
            ));
        }
        Ok(())
    }
}

/// Mutable state of one adaptation run.
#[derive(Debug, Clone)]
pub struct AdaptState {
    pub student: ModelState,
    pub teacher: ModelState,
    /// Frozen pretrained weights; never written.
    source: ModelState,
    pub optimizer: AdamState,
    pub step_counter: u64,
    pub rng: Rng,
    last_segment: Option<(usize, usize)>,
}

impl AdaptState {
    /// Student, teacher and source all start as copies of `source`.
    pub fn new(source: &ModelState, cfg: &AdaptConfig) -> Self {
        Self {
            student: source.snapshot(),
            teacher: source.snapshot(),
            source: source.snapshot(),
            optimizer: AdamState::new(AdamConfig::with_lr(cfg.lr)),
            step_counter: 0,
            rng: rng::derived(cfg.seed, 0x6164_6170),
            last_segment: None,
        }
    }

    pub fn source(&self) -> &ModelState {
        &self.source
    }

    /// Puts the student back to the source weights with a fresh optimizer.
    pub fn reset_student(&mut self) {
        self.student.restore_into(&self.source).expect("same architecture");
        self.optimizer = AdamState::new(self.optimizer.config);
    }
}

/// Result of observing one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// `[B×K]` class probabilities, the online prediction for the batch.
    pub probs: Tensor,
    pub loss: Option<f32>,
    /// Fraction of restorable entries reset to source values this step.
    pub restored_frac: Option<f32>,
    /// Fraction of items whose pseudo-label used augmentation averaging.
    pub aug_frac: Option<f32>,
}

impl StepOutput {
    pub(crate) fn prediction(probs: Tensor) -> Self {
        Self { probs, loss: None, restored_frac: None, aug_frac: None }
    }
}

/// Observe a batch, emit predictions, update self.
pub trait OnlineMethod {
    fn label(&self) -> String;
    fn observe(&mut self, batch: &Batch) -> Result<StepOutput>;
}

/// Any [`Method`] configured by an [`AdaptConfig`].
#[derive(Debug, Clone)]
pub struct Adapter {
    cfg: AdaptConfig,
    state: AdaptState,
}

impl Adapter {
    pub fn new(source: &ModelState, cfg: AdaptConfig) -> Result<Self> {
        cfg.validate()?;
        let state = AdaptState::new(source, &cfg);
        Ok(Self { cfg, state })
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.cfg
    }

    pub fn state(&self) -> &AdaptState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut AdaptState {
        &mut self.state
    }
}

impl OnlineMethod for Adapter {
    fn label(&self) -> String {
        String::from(self.cfg.method.name())
    }

    fn observe(&mut self, batch: &Batch) -> Result<StepOutput> {
        let seg = (batch.meta.round, batch.meta.segment);
        if self.cfg.method == Method::TentOnlineOracle
            && self.state.last_segment.is_some_and(|prev| prev != seg)
        {
            self.state.reset_student();
        }
        self.state.last_segment = Some(seg);
        match self.cfg.method {
            Method::Source => source_step(&mut self.state, batch),
            Method::BnStatsAdapt => bn_stats_step(&mut self.state, batch),
            Method::PseudoLabel => pseudo_label_step(&mut self.state, batch, &self.cfg),
            Method::TentContinual | Method::TentOnlineOracle => tent_step(&mut self.state, batch, &self.cfg),
            Method::Cotta => cotta_step(&mut self.state, batch, &self.cfg),
        }
    }
}
