//! Ensemble × noise sweeps and their summary statistics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{run_indexed, Problem, RunRecord};
use crate::error::Result;
use crate::stopping::RuleKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub ensemble_index: u64,
    pub noise_index: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// Ordered by ensemble index, then noise index.
    pub records: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
}

/// All `n_ensembles × n_noise` runs. Runs that error are recorded as
/// failures and do not stop the sweep.
pub fn sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let problem = Problem::new(cfg)?;
    let pairs: Vec<(u64, u64)> = (0..cfg.sweep.n_ensembles as u64)
        .flat_map(|e| (0..cfg.sweep.n_noise as u64).map(move |n| (e, n)))
        .collect();
    let outcomes: Vec<_> = pairs
        .par_iter()
        .map(|&(e, n)| (e, n, run_indexed(cfg, &problem, e, n)))
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (e, n, outcome) in outcomes {
        match outcome {
            Ok(rec) => records.push(rec),
            Err(err) => failures.push(RunFailure {
                ensemble_index: e,
                noise_index: n,
                message: err.to_string(),
            }),
        }
    }
    Ok(SweepResult { records, failures })
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

/// Quartiles `(q1, median, q3)`.
pub fn quartiles(values: &[f64]) -> Option<(f64, f64, f64)> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some((quantile(&v, 0.25)?, quantile(&v, 0.5)?, quantile(&v, 0.75)?))
}

/// Aggregate of one rule (or of the final time) over a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    /// Rule name, or `final` for the end of the integration.
    pub rule: String,
    pub n_runs: usize,
    pub n_stopped: usize,
    pub time_q1: Option<f64>,
    pub time_median: Option<f64>,
    pub time_q3: Option<f64>,
    pub error_q1: Option<f64>,
    pub error_median: Option<f64>,
    pub error_q3: Option<f64>,
}

impl SummaryRow {
    fn new(rule: String, n_runs: usize, times: &[f64], errors: &[f64]) -> Self {
        let t = quartiles(times);
        let e = quartiles(errors);
        Self {
            rule,
            n_runs,
            n_stopped: times.len(),
            time_q1: t.map(|q| q.0),
            time_median: t.map(|q| q.1),
            time_q3: t.map(|q| q.2),
            error_q1: e.map(|q| q.0),
            error_median: e.map(|q| q.1),
            error_q3: e.map(|q| q.2),
        }
    }
}

/// One row per rule seen in the records, then one for the final time.
/// Empty input gives no rows.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    if records.is_empty() {
        return Vec::new();
    }
    let mut kinds: Vec<RuleKind> = Vec::new();
    for rec in records {
        for s in &rec.stops {
            if !kinds.contains(&s.rule) {
                kinds.push(s.rule);
            }
        }
    }
    let mut rows: Vec<SummaryRow> = kinds
        .into_iter()
        .map(|kind| {
            let stops: Vec<_> = records.iter().filter_map(|r| r.stop(kind)).collect();
            let times: Vec<f64> = stops.iter().filter_map(|s| s.time).collect();
            let errors: Vec<f64> = stops.iter().filter_map(|s| s.parameter_error).collect();
            SummaryRow::new(kind.name().to_string(), stops.len(), &times, &errors)
        })
        .collect();
    let times: Vec<f64> = records.iter().map(|r| r.final_time).collect();
    let errors: Vec<f64> = records.iter().map(|r| r.final_error).collect();
    rows.push(SummaryRow::new("final".into(), records.len(), &times, &errors));
    rows
}
