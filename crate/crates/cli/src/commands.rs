use std::path::{Path, PathBuf};
use std::time::Instant;

use cotta_core::adapt::{AdaptConfig, Adapter, Method};
use cotta_core::eval::{run_online, summarize, MetricsLog};
use cotta_core::nn::{build_model, pretrain as train, ModelState, PretrainReport};
use cotta_core::stream::{GlyphDataset, StreamSpec};

use crate::checkpoint::{self, Provenance};
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::results::{self, MethodSummary};

pub struct PretrainOutcome {
    pub model: ModelState,
    pub report: PretrainReport,
}

/// Generates the clean glyph data, trains the source model and writes the
/// checkpoint.
pub fn pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<PretrainOutcome> {
    let d = &cfg.dataset;
    let train_set = GlyphDataset::generate(d.num_classes, d.train_per_class, cfg.dataset_seed())?;
    let test_set = GlyphDataset::generate(d.num_classes, d.test_per_class, cfg.test_seed())?;
    let mut model = build_model(cfg.architecture()?.id(), d.num_classes, cfg.model_seed())?;
    let pcfg = cfg.pretrain_config();
    let report = train(&mut model, &train_set.images, &train_set.labels, &test_set.images, &test_set.labels, &pcfg)?;
    let provenance = Provenance {
        config_seed: cfg.seed,
        dataset_seed: cfg.dataset_seed(),
        pretrain_seed: pcfg.seed,
        pretrain_epochs: pcfg.epochs,
        clean_test_error: Some(report.test_error),
    };
    checkpoint::save(&model, &provenance, out)?;
    Ok(PretrainOutcome { model, report })
}

/// Loads a checkpoint and checks it fits the config.
pub fn load_source(cfg: &ExperimentConfig, ckpt: &Path) -> Result<ModelState> {
    let (model, _) = checkpoint::load(ckpt)?;
    let arch = cfg.architecture()?;
    if model.architecture() != arch || model.num_classes() != cfg.dataset.num_classes {
        return Err(cotta_core::Error::Contract(format!(
            "checkpoint {} holds {} with {} classes, config asks for {} with {} classes",
            ckpt.display(),
            model.architecture_id(),
            model.num_classes(),
            arch,
            cfg.dataset.num_classes
        ))
        .into());
    }
    Ok(model)
}

/// One method over the stream from a fresh copy of the source model.
pub fn run_method(source: &ModelState, config: &AdaptConfig, stream: &StreamSpec) -> Result<MetricsLog> {
    let mut adapter = Adapter::new(source, config.clone())?;
    Ok(run_online(&mut adapter, stream)?)
}

pub struct AdaptOutcome {
    pub summaries: Vec<MethodSummary>,
    pub table: String,
}

/// Runs every configured method over the same stream and writes per-method
/// CSVs, the run index and the comparison table into `out_dir`.
pub fn adapt(cfg: &ExperimentConfig, ckpt: &Path, out_dir: &Path, mut progress: impl FnMut(&str)) -> Result<AdaptOutcome> {
    let source = load_source(cfg, ckpt)?;
    let stream = cfg.stream_spec()?;
    let runs = cfg.runs()?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;

    let mut summaries = Vec::new();
    for run in &runs {
        let t0 = Instant::now();
        let log = run_method(&source, &run.config, &stream)?;
        let summary = MethodSummary::from_summary(&run.label, &summarize(&log)?);
        if cfg.output.per_batch_csv {
            results::write_batch_log(&log, &out_dir.join(results::batch_file_name(&run.label)))?;
        }
        if cfg.output.summary_csv {
            summary.write(&out_dir.join(results::summary_file_name(&run.label)))?;
        }
        progress(&format!(
            "{}: mean error {:.4} over {} batches ({:.1} s)",
            run.label,
            summary.overall.unwrap_or(f64::NAN),
            log.len(),
            t0.elapsed().as_secs_f64()
        ));
        summaries.push(summary);
    }
    let index: String = runs.iter().map(|r| format!("{}\n", r.label)).collect();
    write(&out_dir.join(results::INDEX_FILE), index.as_bytes())?;
    let table = results::comparison_table(&summaries);
    write(&out_dir.join(results::COMPARISON_FILE), table.as_bytes())?;
    Ok(AdaptOutcome { summaries, table })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Alpha,
    PTh,
    RestoreP,
    NAug,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::PTh => "p_th",
            SweepParam::RestoreP => "restore_p",
            SweepParam::NAug => "n_aug",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [SweepParam::Alpha, SweepParam::PTh, SweepParam::RestoreP, SweepParam::NAug]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown sweep parameter `{s}` (expected alpha, p_th, restore_p or n_aug)")))
    }

    /// `base` with this parameter set to `value`.
    pub fn apply(self, base: &AdaptConfig, value: &str) -> Result<(f64, AdaptConfig)> {
        let bad = || CliError::Config(format!("sweep value `{value}` is not valid for {}", self.name()));
        let mut cfg = base.clone();
        let v = match self {
            SweepParam::Alpha => {
                cfg.alpha = value.parse().map_err(|_| bad())?;
                cfg.alpha as f64
            }
            SweepParam::PTh => {
                cfg.p_th = value.parse().map_err(|_| bad())?;
                cfg.p_th as f64
            }
            SweepParam::RestoreP => {
                cfg.restore_p = value.parse().map_err(|_| bad())?;
                cfg.restore_p
            }
            SweepParam::NAug => {
                cfg.n_aug = value.parse().map_err(|_| bad())?;
                cfg.n_aug as f64
            }
        };
        cfg.validate().map_err(|e| match e {
            cotta_core::Error::Config(m) | cotta_core::Error::Shape(m) | cotta_core::Error::Contract(m) => {
                CliError::Config(format!("{} = {value}: {m}", self.name()))
            }
        })?;
        Ok((v, cfg))
    }
}

/// CoTTA once per value over one shared stream; `(value, mean error)`
/// rows, written to `out`.
pub fn sweep(
    cfg: &ExperimentConfig,
    ckpt: &Path,
    param: SweepParam,
    values: &[String],
    out: &Path,
) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    let base = cfg.adapt_config(Method::Cotta)?;
    // validate every value before spending time on any run
    let configs = values.iter().map(|v| param.apply(&base, v)).collect::<Result<Vec<_>>>()?;
    let source = load_source(cfg, ckpt)?;
    let stream = cfg.stream_spec()?;
    let mut rows = Vec::new();
    for (value, c) in configs {
        let log = run_method(&source, &c, &stream)?;
        rows.push((value, summarize(&log)?.overall));
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    results::write_sweep(&rows, out)?;
    Ok(rows)
}

pub fn default_sweep_path(cfg: &ExperimentConfig, param: SweepParam) -> PathBuf {
    cfg.output.dir.join(format!("sweep_{}.csv", param.name()))
}

/// Reads the summary CSVs of an `adapt` output directory and renders the
/// comparison table. Method order comes from the run index when present,
/// otherwise from the sorted file names.
pub fn report(dir: &Path) -> Result<String> {
    let index = dir.join(results::INDEX_FILE);
    let labels: Vec<String> = if index.exists() {
        std::fs::read_to_string(&index)
            .map_err(|e| CliError::io(&index, e))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect()
    } else {
        let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
        let mut labels = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| CliError::io(dir, e))?;
            if let Some(label) = entry.file_name().to_str().and_then(|n| n.strip_suffix(".summary.csv")) {
                labels.push(label.to_string());
            }
        }
        labels.sort();
        labels
    };
    if labels.is_empty() {
        return Err(CliError::format(dir, "no summary CSVs (*.summary.csv) found"));
    }
    let missing: Vec<String> = labels
        .iter()
        .map(|l| dir.join(results::summary_file_name(l)))
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::format(dir, format!("missing summary files: {}", missing.join(", "))));
    }
    let rows = labels
        .iter()
        .map(|l| MethodSummary::read(l, &dir.join(results::summary_file_name(l))))
        .collect::<Result<Vec<_>>>()?;
    Ok(results::comparison_table(&rows))
}
