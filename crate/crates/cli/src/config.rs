//! Experiment configuration files.
//!
//! A config is TOML with five sections. Every field except the section
//! headers `dataset`, `model`, `stream`, `adapt` and `output` has a
//! default; unknown keys are rejected so typos do not silently fall back to
//! defaults. See `configs/default.toml` for a fully annotated example.
//!
//! Seeds: the top-level `seed` (default 0) derives every section seed that
//! is not given explicitly. The `COTTA_SEED` environment variable replaces
//! the top-level seed *and* clears the explicit section seeds, so one
//! variable re-seeds a whole experiment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cotta_core::adapt::{AdaptConfig, AugmentPolicy, Method, PredictFrom};
use cotta_core::nn::{Architecture, ParamFilter, PretrainConfig, StatsMode};
use cotta_core::rng;
use cotta_core::stream::{gradual_sequence, shuffled_kinds, standard_sequence, CorruptionKind, StreamSpec};
use serde::Deserialize;

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "COTTA_SEED";

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub stream: StreamSection,
    pub adapt: AdaptSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default = "defaults::num_classes")]
    pub num_classes: usize,
    #[serde(default = "defaults::train_per_class")]
    pub train_per_class: usize,
    #[serde(default = "defaults::test_per_class")]
    pub test_per_class: usize,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "defaults::architecture")]
    pub architecture: String,
    #[serde(default = "defaults::pretrain_epochs")]
    pub pretrain_epochs: usize,
    #[serde(default = "defaults::pretrain_batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f32,
    pub seed: Option<u64>,
    /// Present → pretraining augments every batch with this policy.
    pub augment: Option<AugmentToml>,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    Standard,
    Gradual,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StreamSection {
    #[serde(default = "defaults::mode")]
    pub mode: StreamMode,
    /// Corruption kind names; empty means all ten.
    #[serde(default)]
    pub kinds: Vec<String>,
    /// Apply a seeded permutation to `kinds`.
    #[serde(default)]
    pub shuffle_kinds: bool,
    #[serde(default = "defaults::severity")]
    pub severity: u8,
    #[serde(default = "defaults::batches_per_kind")]
    pub batches_per_kind: usize,
    #[serde(default = "defaults::batches_per_step")]
    pub batches_per_step: usize,
    #[serde(default = "defaults::stream_batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::one")]
    pub rounds: usize,
    #[serde(default = "defaults::yes")]
    pub reseed_rounds: bool,
    pub seed: Option<u64>,
}

/// Adaptation knobs. Every field is optional; unset fields keep the
/// method's defaults.
#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AdaptKnobs {
    pub alpha: Option<f32>,
    pub restore_p: Option<f64>,
    pub p_th: Option<f32>,
    pub n_aug: Option<usize>,
    pub lr: Option<f32>,
    pub enable_weight_avg: Option<bool>,
    pub enable_aug_avg: Option<bool>,
    pub enable_restore: Option<bool>,
    pub predict_from: Option<PredictFromToml>,
    pub adapt_stats: Option<StatsToml>,
    pub source_conf_stats: Option<StatsToml>,
    pub restore_scope: Option<ScopeToml>,
    pub hard_pseudo_labels: Option<bool>,
    pub augment: Option<AugmentToml>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AdaptSection {
    #[serde(default = "defaults::methods")]
    pub methods: Vec<String>,
    /// Also run the two partial CoTTA variants (weight averaging only;
    /// weight + augmentation averaging) ahead of full CoTTA.
    #[serde(default)]
    pub ablation: bool,
    pub seed: Option<u64>,
    #[serde(flatten)]
    pub common: AdaptKnobs,
    /// Per-method overrides, keyed by method name.
    #[serde(default)]
    pub per_method: BTreeMap<String, AdaptKnobs>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "defaults::dir")]
    pub dir: PathBuf,
    #[serde(default = "defaults::yes")]
    pub per_batch_csv: bool,
    #[serde(default = "defaults::yes")]
    pub summary_csv: bool,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum PredictFromToml {
    Refined,
    TeacherDirect,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum StatsToml {
    CurrentBatch,
    Running,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ScopeToml {
    All,
    NormAffine,
}

/// Augmentation policy overrides on top of the defaults.
#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AugmentToml {
    pub brightness: Option<(f32, f32)>,
    pub contrast: Option<(f32, f32)>,
    pub max_rotation_deg: Option<f32>,
    pub max_translate: Option<f32>,
    pub scale: Option<(f32, f32)>,
    pub blur_prob: Option<f64>,
    pub blur_sigma: Option<(f32, f32)>,
    pub flip_prob: Option<f64>,
    pub max_noise: Option<f32>,
    /// Start from the identity policy instead of the defaults.
    #[serde(default)]
    pub identity: bool,
}

mod defaults {
    use std::path::PathBuf;

    use super::StreamMode;

    pub fn num_classes() -> usize {
        10
    }
    pub fn train_per_class() -> usize {
        300
    }
    pub fn test_per_class() -> usize {
        100
    }
    pub fn architecture() -> String {
        "mlp-small".into()
    }
    pub fn pretrain_epochs() -> usize {
        10
    }
    pub fn pretrain_batch_size() -> usize {
        64
    }
    pub fn lr() -> f32 {
        1e-3
    }
    pub fn mode() -> StreamMode {
        StreamMode::Standard
    }
    pub fn severity() -> u8 {
        5
    }
    pub fn batches_per_kind() -> usize {
        25
    }
    pub fn batches_per_step() -> usize {
        3
    }
    pub fn stream_batch_size() -> usize {
        32
    }
    pub fn one() -> usize {
        1
    }
    pub fn yes() -> bool {
        true
    }
    pub fn methods() -> Vec<String> {
        cotta_core::adapt::Method::ALL.iter().map(|m| m.name().to_string()).collect()
    }
    pub fn dir() -> PathBuf {
        PathBuf::from("results")
    }
}

/// One adaptation run of the `adapt` command: a row of the comparison
/// table.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub label: String,
    pub config: AdaptConfig,
}

/// Labels of the partial CoTTA variants added by `adapt.ablation`.
pub const ABLATION_WEIGHT_AVG: &str = "cotta_weight_avg";
pub const ABLATION_AUG_AVG: &str = "cotta_weight_aug_avg";

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {}", path.display(), msg)),
            other => other,
        })
    }

    /// Parses, applies the seed override from the environment, and
    /// validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(seed) = seed_override()? {
            cfg.apply_seed_override(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_seed_override(&mut self, seed: u64) {
        self.seed = seed;
        self.dataset.seed = None;
        self.model.seed = None;
        self.stream.seed = None;
        self.adapt.seed = None;
    }

    fn derived(&self, explicit: Option<u64>, section: u64) -> u64 {
        explicit.unwrap_or_else(|| rng::stream_id(&[self.seed, section]))
    }

    pub fn dataset_seed(&self) -> u64 {
        self.derived(self.dataset.seed, 1)
    }

    /// The held-out clean set uses its own seed so it never overlaps the
    /// training set.
    pub fn test_seed(&self) -> u64 {
        rng::stream_id(&[self.dataset_seed(), 0x7465_7374])
    }

    pub fn model_seed(&self) -> u64 {
        self.derived(self.model.seed, 2)
    }

    pub fn stream_seed(&self) -> u64 {
        self.derived(self.stream.seed, 3)
    }

    pub fn adapt_seed(&self) -> u64 {
        self.derived(self.adapt.seed, 4)
    }

    pub fn architecture(&self) -> Result<Architecture> {
        self.model.architecture.parse().map_err(|e| field_err("model.architecture", e))
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.model.pretrain_epochs,
            batch_size: self.model.batch_size,
            lr: self.model.lr,
            seed: self.model_seed(),
            augment: self.model.augment.map(|a| a.policy()),
        }
    }

    pub fn kinds(&self) -> Result<Vec<CorruptionKind>> {
        let kinds = if self.stream.kinds.is_empty() {
            CorruptionKind::ALL.to_vec()
        } else {
            self.stream
                .kinds
                .iter()
                .enumerate()
                .map(|(i, k)| k.parse().map_err(|e| field_err(&format!("stream.kinds[{i}]"), e)))
                .collect::<Result<Vec<_>>>()?
        };
        Ok(if self.stream.shuffle_kinds { shuffled_kinds(&kinds, self.stream_seed()) } else { kinds })
    }

    pub fn stream_spec(&self) -> Result<StreamSpec> {
        let s = &self.stream;
        let kinds = self.kinds()?;
        let k = self.dataset.num_classes;
        let spec = match s.mode {
            StreamMode::Standard => {
                standard_sequence(&kinds, s.severity, s.batches_per_kind, s.batch_size, k, self.stream_seed())
            }
            StreamMode::Gradual => gradual_sequence(&kinds, s.batches_per_step, s.batch_size, k, self.stream_seed()),
        }
        .map_err(|e| field_err("stream", e))?;
        Ok(StreamSpec { reseed_rounds: s.reseed_rounds, ..spec.with_rounds(s.rounds) })
    }

    /// The adaptation config of `method` with common and per-method knobs
    /// applied.
    pub fn adapt_config(&self, method: Method) -> Result<AdaptConfig> {
        let mut cfg = AdaptConfig { seed: self.adapt_seed(), ..AdaptConfig::for_method(method) };
        self.adapt.common.apply(&mut cfg);
        if let Some(over) = self.adapt.per_method.get(method.name()) {
            over.apply(&mut cfg);
        }
        cfg.validate().map_err(|e| field_err(&format!("adapt ({})", method.name()), e))?;
        Ok(cfg)
    }

    /// Every run of the `adapt` command, in table order.
    pub fn runs(&self) -> Result<Vec<RunSpec>> {
        let mut runs = Vec::new();
        for (i, name) in self.adapt.methods.iter().enumerate() {
            let method: Method = name.parse().map_err(|e| field_err(&format!("adapt.methods[{i}]"), e))?;
            let config = self.adapt_config(method)?;
            if method == Method::Cotta && self.adapt.ablation {
                let weight_only = AdaptConfig { enable_aug_avg: false, enable_restore: false, ..config.clone() };
                let no_restore = AdaptConfig { enable_restore: false, ..config.clone() };
                runs.push(RunSpec { label: ABLATION_WEIGHT_AVG.into(), config: weight_only });
                runs.push(RunSpec { label: ABLATION_AUG_AVG.into(), config: no_restore });
            }
            runs.push(RunSpec { label: name.clone(), config });
        }
        Ok(runs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.train_per_class == 0 || self.dataset.test_per_class == 0 {
            return Err(CliError::Config("dataset: train_per_class and test_per_class must be at least 1".into()));
        }
        self.architecture()?;
        if self.model.batch_size == 0 {
            return Err(CliError::Config("model.batch_size must be at least 1".into()));
        }
        if !(self.model.lr > 0.0 && self.model.lr.is_finite()) {
            return Err(CliError::Config(format!("model.lr must be positive, got {}", self.model.lr)));
        }
        if self.stream.rounds == 0 {
            return Err(CliError::Config("stream.rounds must be at least 1".into()));
        }
        self.stream_spec()?.validate().map_err(|e| field_err("stream", e))?;
        if self.adapt.methods.is_empty() {
            return Err(CliError::Config("adapt.methods must list at least one method".into()));
        }
        for name in self.adapt.per_method.keys() {
            name.parse::<Method>().map_err(|e| field_err(&format!("adapt.per_method.{name}"), e))?;
        }
        let runs = self.runs()?;
        let mut labels: Vec<&str> = runs.iter().map(|r| r.label.as_str()).collect();
        labels.sort_unstable();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(CliError::Config(format!("adapt.methods lists `{}` twice", w[0])));
        }
        Ok(())
    }
}

impl AdaptKnobs {
    fn apply(&self, cfg: &mut AdaptConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { cfg.$f = v; })* };
        }
        set!(alpha, restore_p, p_th, n_aug, lr, enable_weight_avg, enable_aug_avg, enable_restore, hard_pseudo_labels);
        if let Some(p) = self.predict_from {
            cfg.predict_from = match p {
                PredictFromToml::Refined => PredictFrom::Refined,
                PredictFromToml::TeacherDirect => PredictFrom::TeacherDirect,
            };
        }
        if let Some(s) = self.adapt_stats {
            cfg.adapt_stats = s.into();
        }
        if let Some(s) = self.source_conf_stats {
            cfg.source_conf_stats = s.into();
        }
        if let Some(s) = self.restore_scope {
            cfg.restore_scope = match s {
                ScopeToml::All => ParamFilter::All,
                ScopeToml::NormAffine => ParamFilter::NormAffine,
            };
        }
        if let Some(a) = self.augment {
            cfg.augment = a.policy();
        }
    }
}

impl From<StatsToml> for StatsMode {
    fn from(s: StatsToml) -> Self {
        match s {
            StatsToml::CurrentBatch => StatsMode::UseCurrentBatch,
            StatsToml::Running => StatsMode::UseRunning,
        }
    }
}

impl AugmentToml {
    pub fn policy(&self) -> AugmentPolicy {
        let mut p = if self.identity { AugmentPolicy::identity() } else { AugmentPolicy::default() };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { p.$f = v; })* };
        }
        set!(brightness, contrast, max_rotation_deg, max_translate, scale, blur_prob, blur_sigma, flip_prob, max_noise);
        p
    }
}

fn field_err(field: &str, e: cotta_core::Error) -> CliError {
    let msg = match e {
        cotta_core::Error::Config(m) | cotta_core::Error::Shape(m) | cotta_core::Error::Contract(m) => m,
    };
    CliError::Config(format!("{field}: {msg}"))
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::Config(format!("{SEED_ENV}: {e}"))),
    }
}
