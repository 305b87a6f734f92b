//! CSV result files and the comparison table.
//!
//! Per-batch log, one row per batch:
//! `step,round,kind,severity,error,conf,loss,restored_frac`
//! (`loss` / `restored_frac` empty for methods without them).
//!
//! Summary, one row per segment, then per round, then overall:
//! `scope,kind_or_round,mean_error` with scope `segment` / `round` /
//! `overall`.
//!
//! Sweep: `value,mean_error`.
//!
//! Reals are written with 6 significant digits, so files are byte-stable.

use std::fmt::Write as _;
use std::path::Path;

use cotta_core::eval::{MetricsLog, MetricsRow, Summary};

use crate::error::{CliError, Result};

pub const BATCH_HEADER: [&str; 8] = ["step", "round", "kind", "severity", "error", "conf", "loss", "restored_frac"];
pub const SUMMARY_HEADER: [&str; 3] = ["scope", "kind_or_round", "mean_error"];
pub const SWEEP_HEADER: [&str; 2] = ["value", "mean_error"];

/// Shortest `%g`-style rendering with 6 significant digits.
pub fn fmt_sig(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{v:.5e}");
    let (mant, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..6).contains(&exp) {
        trim_zeros(format!("{:.*}", (5 - exp) as usize, v))
    } else {
        format!("{}e{}", trim_zeros(mant.to_string()), exp)
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_sig).unwrap_or_default()
}

pub fn batch_log_csv(log: &MetricsLog) -> Vec<u8> {
    csv_bytes(
        &BATCH_HEADER,
        log.rows().iter().map(|r| {
            vec![
                r.step.to_string(),
                r.round.to_string(),
                r.kind.name().to_string(),
                r.severity.to_string(),
                fmt_sig(r.error),
                fmt_sig(r.conf),
                opt(r.loss),
                opt(r.restored_frac),
            ]
        }),
    )
}

pub fn write_batch_log(log: &MetricsLog, path: &Path) -> Result<()> {
    write_file(path, &batch_log_csv(log))
}

/// One parsed row of a per-batch CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    pub step: usize,
    pub round: usize,
    pub kind: String,
    pub severity: u8,
    pub error: f64,
    pub conf: f64,
    pub loss: Option<f64>,
    pub restored_frac: Option<f64>,
}

impl BatchRecord {
    pub fn matches(&self, row: &MetricsRow, tol: f64) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0);
        let close_opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => close(a, b),
            (None, None) => true,
            _ => false,
        };
        self.step == row.step
            && self.round == row.round
            && self.kind == row.kind.name()
            && self.severity == row.severity
            && close(self.error, row.error)
            && close(self.conf, row.conf)
            && close_opt(self.loss, row.loss)
            && close_opt(self.restored_frac, row.restored_frac)
    }
}

fn reader(path: &Path, header: &[&str]) -> Result<csv::Reader<std::fs::File>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::format(path, e.to_string()))?;
    let got = r.headers().map_err(|e| CliError::format(path, e.to_string()))?;
    if got.iter().ne(header.iter().copied()) {
        return Err(CliError::format(path, format!("expected header {}, got {}", header.join(","), got.iter().collect::<Vec<_>>().join(","))));
    }
    Ok(r)
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, path: &Path) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CliError::format(path, format!("line {}: bad column {}", rec.position().map_or(0, |p| p.line()), i + 1)))
}

fn opt_field(rec: &csv::StringRecord, i: usize, path: &Path) -> Result<Option<f64>> {
    match rec.get(i) {
        Some("") => Ok(None),
        _ => field(rec, i, path).map(Some),
    }
}

pub fn read_batch_log(path: &Path) -> Result<Vec<BatchRecord>> {
    let mut out = Vec::new();
    for rec in reader(path, &BATCH_HEADER)?.records() {
        let rec = rec.map_err(|e| CliError::format(path, e.to_string()))?;
        out.push(BatchRecord {
            step: field(&rec, 0, path)?,
            round: field(&rec, 1, path)?,
            kind: field(&rec, 2, path)?,
            severity: field(&rec, 3, path)?,
            error: field(&rec, 4, path)?,
            conf: field(&rec, 5, path)?,
            loss: opt_field(&rec, 6, path)?,
            restored_frac: opt_field(&rec, 7, path)?,
        });
    }
    Ok(out)
}

/// A method's summary as it appears in files: values already rounded to
/// their CSV representation.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub label: String,
    /// `(kind name, mean error)` per segment, in stream order.
    pub segments: Vec<(String, f64)>,
    pub rounds: Vec<(usize, f64)>,
    pub overall: Option<f64>,
}

fn rounded(v: f64) -> f64 {
    fmt_sig(v).parse().expect("round-trips")
}

impl MethodSummary {
    pub fn from_summary(label: &str, s: &Summary) -> Self {
        Self {
            label: label.into(),
            segments: s.segments.iter().map(|g| (g.kind.name().to_string(), rounded(g.mean_error))).collect(),
            rounds: s.rounds.iter().map(|r| (r.round, rounded(r.mean_error))).collect(),
            overall: Some(rounded(s.overall)),
        }
    }

    pub fn empty(label: &str) -> Self {
        Self { label: label.into(), segments: Vec::new(), rounds: Vec::new(), overall: None }
    }

    /// Writes nothing but the header when there is nothing to summarize.
    pub fn to_csv(&self) -> Vec<u8> {
        let seg = self.segments.iter().map(|(k, v)| vec!["segment".into(), k.clone(), fmt_sig(*v)]);
        let rnd = self.rounds.iter().map(|(r, v)| vec!["round".into(), r.to_string(), fmt_sig(*v)]);
        let all = self.overall.map(|v| vec!["overall".into(), "all".into(), fmt_sig(v)]);
        csv_bytes(&SUMMARY_HEADER, seg.chain(rnd).chain(all))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_csv())
    }

    pub fn read(label: &str, path: &Path) -> Result<Self> {
        let mut s = Self::empty(label);
        for rec in reader(path, &SUMMARY_HEADER)?.records() {
            let rec = rec.map_err(|e| CliError::format(path, e.to_string()))?;
            let v: f64 = field(&rec, 2, path)?;
            match &rec[0] {
                "segment" => s.segments.push((rec[1].to_string(), v)),
                "round" => s.rounds.push((field(&rec, 1, path)?, v)),
                "overall" => s.overall = Some(v),
                other => return Err(CliError::format(path, format!("unknown scope `{other}`"))),
            }
        }
        Ok(s)
    }
}

pub fn summary_file_name(label: &str) -> String {
    format!("{label}.summary.csv")
}

pub fn batch_file_name(label: &str) -> String {
    format!("{label}.batches.csv")
}

/// File listing the run labels of an `adapt` output directory in order.
pub const INDEX_FILE: &str = "runs.txt";
pub const COMPARISON_FILE: &str = "comparison.txt";

/// Methods × segments table of error rates in percent, with a final
/// `mean` column and one column per round when there are several.
pub fn comparison_table(rows: &[MethodSummary]) -> String {
    let columns: Vec<String> = rows.iter().max_by_key(|r| r.segments.len()).map_or(Vec::new(), |r| {
        r.segments.iter().map(|(k, _)| k.clone()).collect()
    });
    let n_rounds = rows.iter().map(|r| r.rounds.len()).max().unwrap_or(0);
    let mut header = vec!["method".to_string()];
    header.extend(columns.iter().cloned());
    header.push("mean".into());
    if n_rounds > 1 {
        header.extend((1..=n_rounds).map(|r| format!("round{r}")));
    }
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
    let mut cells: Vec<Vec<String>> = vec![header];
    for r in rows {
        let mut line = vec![r.label.clone()];
        line.extend((0..columns.len()).map(|i| pct(r.segments.get(i).map(|s| s.1))));
        line.push(pct(r.overall));
        if n_rounds > 1 {
            line.extend((0..n_rounds).map(|i| pct(r.rounds.get(i).map(|s| s.1))));
        }
        cells.push(line);
    }
    let widths: Vec<usize> =
        (0..cells[0].len()).map(|c| cells.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for line in &cells {
        let mut text = String::new();
        for (c, cell) in line.iter().enumerate() {
            if c == 0 {
                let _ = write!(text, "{cell:<w$}", w = widths[c]);
            } else {
                let _ = write!(text, "  {cell:>w$}", w = widths[c]);
            }
        }
        out.push_str(text.trim_end());
        out.push('\n');
    }
    out
}

pub fn sweep_csv(rows: &[(f64, f64)]) -> Vec<u8> {
    csv_bytes(&SWEEP_HEADER, rows.iter().map(|(v, e)| vec![fmt_sig(*v), fmt_sig(*e)]))
}

pub fn write_sweep(rows: &[(f64, f64)], path: &Path) -> Result<()> {
    write_file(path, &sweep_csv(rows))
}
