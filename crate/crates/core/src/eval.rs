//! Online evaluation: per-batch error against hidden labels and its
//! aggregation into segment, round and forgetting summaries.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::adapt::OnlineMethod;
use crate::error::{contract_err, Result};
use crate::stream::{BatchMeta, CorruptionKind, StreamSpec};
use crate::tensor::Tensor;

/// One evaluated batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub round: usize,
    pub segment: usize,
    pub kind: CorruptionKind,
    pub severity: u8,
    /// Fraction of items whose argmax prediction differs from the label.
    pub error: f64,
    /// Mean max-probability of the prediction.
    pub conf: f64,
    pub loss: Option<f64>,
    pub restored_frac: Option<f64>,
}

/// Append-only log with strictly increasing steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends a row built elsewhere (for instance parsed back from CSV).
    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(contract_err!("step {} does not follow step {}", row.step, last.step));
            }
        }
        if !(0.0..=1.0).contains(&row.error) {
            return Err(contract_err!("error rate {} outside [0, 1]", row.error));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Scores `probs` (`[B×K]`) against `labels` and appends the row.
    pub fn record(
        &mut self,
        meta: &BatchMeta,
        probs: &Tensor,
        labels: &[usize],
        loss: Option<f32>,
        restored_frac: Option<f32>,
    ) -> Result<&MetricsRow> {
        if probs.shape().len() != 2 || probs.shape()[0] != labels.len() {
            return Err(contract_err!(
                "predictions {:?} do not match {} labels",
                probs.shape(),
                labels.len()
            ));
        }
        let b = labels.len();
        let wrong = probs.argmax_rows().iter().zip(labels).filter(|(p, l)| p != l).count();
        let conf = probs.max_rows().iter().map(|&c| c as f64).sum::<f64>() / b as f64;
        self.push(MetricsRow {
            step: meta.step,
            round: meta.round,
            segment: meta.segment,
            kind: meta.kind,
            severity: meta.severity,
            error: wrong as f64 / b as f64,
            conf,
            loss: loss.map(f64::from),
            restored_frac: restored_frac.map(f64::from),
        })?;
        Ok(self.rows.last().expect("just pushed"))
    }

    pub fn mean_error(&self) -> Option<f64> {
        (!self.rows.is_empty()).then(|| self.rows.iter().map(|r| r.error).sum::<f64>() / self.rows.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSummary {
    /// Position of the segment within a round.
    pub segment: usize,
    pub kind: CorruptionKind,
    /// Batches over all rounds.
    pub batches: usize,
    pub mean_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundSummary {
    pub round: usize,
    pub batches: usize,
    pub mean_error: f64,
}

/// Error of the last round minus error of the first, per segment.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingDelta {
    pub segment: usize,
    pub kind: CorruptionKind,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub segments: Vec<SegmentSummary>,
    /// Batch-count-weighted mean of the segment means.
    pub overall: f64,
    pub rounds: Vec<RoundSummary>,
    /// Absent when the log covers a single round.
    pub forgetting: Option<Vec<ForgettingDelta>>,
}

#[derive(Default)]
struct Acc {
    sum: f64,
    n: usize,
}

impl Acc {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }
}

pub fn summarize(log: &MetricsLog) -> Result<Summary> {
    if log.is_empty() {
        return Err(contract_err!("cannot summarize an empty log"));
    }
    let mut by_segment: BTreeMap<(usize, CorruptionKind), Acc> = BTreeMap::new();
    let mut by_round: BTreeMap<usize, Acc> = BTreeMap::new();
    let mut by_round_segment: BTreeMap<(usize, usize, CorruptionKind), Acc> = BTreeMap::new();
    for r in log.rows() {
        by_segment.entry((r.segment, r.kind)).or_default().add(r.error);
        by_round.entry(r.round).or_default().add(r.error);
        by_round_segment.entry((r.round, r.segment, r.kind)).or_default().add(r.error);
    }
    let segments: Vec<SegmentSummary> = by_segment
        .iter()
        .map(|(&(segment, kind), a)| SegmentSummary { segment, kind, batches: a.n, mean_error: a.mean() })
        .collect();
    let overall = weighted_mean(&segments);
    let rounds: Vec<RoundSummary> = by_round
        .iter()
        .map(|(&round, a)| RoundSummary { round, batches: a.n, mean_error: a.mean() })
        .collect();
    let forgetting = if rounds.len() > 1 {
        let first = rounds[0].round;
        let last = rounds[rounds.len() - 1].round;
        let deltas = segments
            .iter()
            .filter_map(|s| {
                let a = by_round_segment.get(&(first, s.segment, s.kind))?;
                let b = by_round_segment.get(&(last, s.segment, s.kind))?;
                Some(ForgettingDelta { segment: s.segment, kind: s.kind, delta: b.mean() - a.mean() })
            })
            .collect();
        Some(deltas)
    } else {
        None
    };
    Ok(Summary { segments, overall, rounds, forgetting })
}

/// `Σ n_s·mean_s / Σ n_s`.
pub fn weighted_mean(segments: &[SegmentSummary]) -> f64 {
    let total: usize = segments.iter().map(|s| s.batches).sum();
    segments.iter().map(|s| s.batches as f64 * s.mean_error).sum::<f64>() / total as f64
}

/// Sample mean and (n−1) standard deviation; the deviation is 0 for a single
/// value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, crate::math::sqrt_f64(var))
}

/// Feeds every batch of `stream` to `method` in order and scores each
/// online prediction against the batch's hidden labels. The method only
/// ever sees the label-free [`crate::stream::Batch`].
pub fn run_online(method: &mut dyn OnlineMethod, stream: &StreamSpec) -> Result<MetricsLog> {
    run_online_with(method, stream, |_| {})
}

/// [`run_online`] with a callback after each recorded row.
pub fn run_online_with(
    method: &mut dyn OnlineMethod,
    stream: &StreamSpec,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<MetricsLog> {
    let mut log = MetricsLog::new();
    for (batch, labels) in stream.iter()? {
        let out = method.observe(&batch)?;
        let row = log.record(&batch.meta, &out.probs, labels.as_slice(), out.loss, out.restored_frac)?;
        on_row(row);
    }
    Ok(log)
}
