//! Per-case results, aggregates and their JSON/CSV files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Method;
use crate::baseline::mean_std;
use crate::error::{invalid, Error, Result};
use crate::inference::{InferenceConfig, IterationTrace, Termination};
use crate::volume::{dsc, LabelMask};

/// Iteration counts at which the inter-iteration Dice is tabulated.
pub const D_TABLE_POINTS: [usize; 5] = [1, 2, 3, 5, 10];

/// Outcome of testing one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub id: String,
    pub fold: usize,
    /// Final prediction against the full ground truth.
    pub dsc: f64,
    /// Coarse-stage prediction against the full ground truth.
    pub coarse_dsc: f64,
    /// Fine iterations run.
    pub iterations: usize,
    pub termination: Termination,
    pub d_sequence: Vec<f64>,
    pub fallback_iterations: Vec<usize>,
    pub predicted_voxels: usize,
    pub target_voxels: usize,
}

impl CaseResult {
    pub fn from_trace(
        id: &str,
        fold: usize,
        trace: &IterationTrace,
        truth: &LabelMask,
    ) -> Result<Self> {
        Ok(Self {
            id: id.to_string(),
            fold,
            dsc: dsc(trace.final_mask(), truth)?,
            coarse_dsc: dsc(trace.coarse_mask(), truth)?,
            iterations: trace.iterations,
            termination: trace.termination,
            d_sequence: trace.d.clone(),
            fallback_iterations: trace.fallback_iterations.clone(),
            predicted_voxels: trace.final_mask().count(),
            target_voxels: truth.count(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub max: f64,
    pub min: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self {
            mean,
            std,
            max: values.iter().cloned().fold(f64::NAN, f64::max),
            min: values.iter().cloned().fold(f64::NAN, f64::min),
        }
    }
}

/// Mean inter-iteration Dice after `t` fine iterations, over the cases that ran that long.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DEntry {
    pub t: usize,
    pub mean: f64,
    pub cases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub method: Method,
    pub oracle: bool,
    pub threshold: f64,
    pub max_iterations: usize,
    pub cases: Vec<CaseResult>,
    pub dsc: Stats,
    pub coarse_dsc: Stats,
    pub iterations: Stats,
    pub d_table: Vec<DEntry>,
    /// Fraction of cases that stopped on the threshold.
    pub convergence_rate: f64,
}

impl Report {
    pub fn new(method: Method, cfg: &InferenceConfig, cases: Vec<CaseResult>) -> Result<Self> {
        if cases.is_empty() {
            return Err(invalid!("a report needs at least one case"));
        }
        let col = |f: fn(&CaseResult) -> f64| cases.iter().map(f).collect::<Vec<_>>();
        let dsc = Stats::of(&col(|c| c.dsc));
        let coarse_dsc = Stats::of(&col(|c| c.coarse_dsc));
        let iterations = Stats::of(&col(|c| c.iterations as f64));
        let converged = cases
            .iter()
            .filter(|c| c.termination == Termination::Threshold)
            .count();
        Ok(Self {
            method,
            oracle: cfg.oracle_boxes,
            threshold: cfg.threshold,
            max_iterations: cfg.max_iterations,
            d_table: d_table(&cases),
            convergence_rate: converged as f64 / cases.len() as f64,
            dsc,
            coarse_dsc,
            iterations,
            cases,
        })
    }

    /// Fraction of cases whose final prediction scores at least as well as their coarse stage.
    pub fn fine_at_least_coarse_rate(&self) -> f64 {
        let n = self.cases.iter().filter(|c| c.dsc >= c.coarse_dsc).count();
        n as f64 / self.cases.len() as f64
    }

    pub fn d_at(&self, t: usize) -> Option<f64> {
        self.d_table.iter().find(|e| e.t == t).map(|e| e.mean)
    }

    /// File stem used by [`report_emit`].
    pub fn stem(&self) -> String {
        let m = serde_json::to_value(self.method)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        if self.oracle {
            format!("report_{m}_oracle")
        } else {
            format!("report_{m}")
        }
    }
}

fn d_table(cases: &[CaseResult]) -> Vec<DEntry> {
    let observed = cases.iter().map(|c| c.iterations).max().unwrap_or(0);
    D_TABLE_POINTS
        .iter()
        .filter(|&&t| t <= observed)
        .map(|&t| {
            let vals: Vec<f64> = cases
                .iter()
                .filter_map(|c| c.d_sequence.get(t - 1).copied())
                .collect();
            DEntry {
                t,
                mean: vals.iter().sum::<f64>() / vals.len() as f64,
                cases: vals.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct CsvRow {
    pub id: String,
    pub dsc: f64,
    pub iterations: usize,
    pub termination: Termination,
}

/// Write `report` into `dir` as `<stem>.json` and/or `<stem>.csv`.
pub fn report_emit(report: &Report, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for f in formats {
        let path = match f {
            ReportFormat::Json => {
                let path = dir.join(format!("{}.json", report.stem()));
                fs::write(&path, serde_json::to_vec_pretty(report)?)
                    .map_err(|e| Error::io(&path, e))?;
                path
            }
            ReportFormat::Csv => {
                let path = dir.join(format!("{}.csv", report.stem()));
                let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
                for c in &report.cases {
                    w.serialize(CsvRow {
                        id: c.id.clone(),
                        dsc: c.dsc,
                        iterations: c.iterations,
                        termination: c.termination,
                    })
                    .map_err(|e| csv_err(&path, e))?;
                }
                w.flush().map_err(|e| Error::io(&path, e))?;
                path
            }
        };
        written.push(path);
    }
    Ok(written)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}
