//! Metric logs, spectral reports, covariance dumps and plot data.
//!
//! Floats are written with Rust's shortest round-trip formatting, so
//! reading a CSV back yields the exact values that were logged.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tailspace_core::analysis::{EffectiveRankReport, LayerRank};
use tailspace_core::train::{MetricLog, StepRecord};
use tailspace_core::Matrix;

use crate::error::{LabError, Result};
use crate::tspm;

pub const METRICS_HEADER: &str = "step,lr,loss,grad_norm";
pub const REPORT_HEADER: &str = "layer,type,index,effective_rank";

/// Writes via a sibling temporary file and a rename, so readers never see a
/// half-written file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| LabError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| LabError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| LabError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| LabError::io(path, e))
}

pub fn metrics_csv(log: &MetricLog) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in &log.records {
        writeln!(out, "{},{:?},{:?},{:?}", r.step, r.lr, r.loss, r.grad_norm).expect("write to String");
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<StepRecord>> {
    let bad = |line: usize, msg: &str| LabError::format("metrics CSV", format!("line {line}: {msg}"));
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(bad(1, "missing header"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad(i + 2, "expected 4 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 2, "bad number"));
            Ok(StepRecord {
                step: f[0].parse().map_err(|_| bad(i + 2, "bad step"))?,
                lr: num(f[1])?,
                loss: num(f[2])?,
                grad_norm: num(f[3])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub steps: usize,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    pub initial_loss: f64,
}

impl MetricSummary {
    pub fn from_log(log: &MetricLog) -> Self {
        Self {
            steps: log.steps,
            final_loss: log.final_loss,
            final_grad_norm: log.final_grad_norm(),
            initial_loss: log.records.first().map_or(log.final_loss, |r| r.loss),
        }
    }
}

/// Step-indexed series for external plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub step: Vec<usize>,
    pub lr: Vec<f64>,
    pub loss: Vec<f64>,
    pub grad_norm: Vec<f64>,
}

impl PlotData {
    pub fn from_log(log: &MetricLog) -> Self {
        Self {
            step: log.records.iter().map(|r| r.step).collect(),
            lr: log.records.iter().map(|r| r.lr).collect(),
            loss: log.records.iter().map(|r| r.loss).collect(),
            grad_norm: log.records.iter().map(|r| r.grad_norm).collect(),
        }
    }
}

/// Writes `metrics.csv`, `summary.json` and `plot.json` into `dir`.
pub fn write_metric_log(dir: &Path, log: &MetricLog) -> Result<()> {
    write_text(&dir.join("metrics.csv"), &metrics_csv(log))?;
    write_text(&dir.join("summary.json"), &serde_json::to_string_pretty(&MetricSummary::from_log(log))?)?;
    write_text(&dir.join("plot.json"), &serde_json::to_string(&PlotData::from_log(log))?)
}

pub fn report_csv(report: &EffectiveRankReport) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for l in &report.layers {
        writeln!(out, "{},{},{},{:?}", l.layer, l.kind, l.index, l.effective_rank).expect("write to String");
    }
    out
}

/// Rows of a report CSV: `(layer, type, index, effective_rank)`.
pub fn parse_report_csv(text: &str) -> Result<Vec<(String, String, usize, f64)>> {
    let bad = |line: usize| LabError::format("report CSV", format!("line {line} is malformed"));
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(LabError::format("report CSV", "missing header"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad(i + 2));
            }
            Ok((
                f[0].to_string(),
                f[1].to_string(),
                f[2].parse().map_err(|_| bad(i + 2))?,
                f[3].parse().map_err(|_| bad(i + 2))?,
            ))
        })
        .collect()
}

/// Writes `<stem>.csv` and one `<stem>.<layer>.spectrum.tspm` per layer.
pub fn write_report(dir: &Path, stem: &str, report: &EffectiveRankReport) -> Result<PathBuf> {
    let csv = dir.join(format!("{stem}.csv"));
    write_text(&csv, &report_csv(report))?;
    for LayerRank { layer, eigenvalues, .. } in &report.layers {
        tspm::save_vector(&dir.join(format!("{stem}.{layer}.spectrum.tspm")), eigenvalues)?;
    }
    Ok(csv)
}

/// `<layer>.cov.tspm` for every covariance.
pub fn write_covariances(dir: &Path, covs: &BTreeMap<String, Matrix>) -> Result<Vec<PathBuf>> {
    covs.iter()
        .map(|(name, cov)| {
            let path = dir.join(format!("{name}.cov.tspm"));
            tspm::save(&path, cov).map(|_| path)
        })
        .collect()
}
