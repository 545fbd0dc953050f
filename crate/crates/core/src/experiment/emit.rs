//! CSV, JSON and SVG output.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::run::{RunRecord, SeriesRow, Stat, StopRecord};
use super::svg::{loglog_plot, Series};
use super::sweep::{summarize, SweepResult};
use crate::error::{EkiError, Result};

const STAT_COLUMNS: [&str; 8] = [
    "deviation_sq",
    "mapped_deviation_sq",
    "misfit_sq",
    "misfit_par_sq",
    "misfit_perp_sq",
    "mapped_residual_sq",
    "mapped_residual_par_sq",
    "mapped_residual_perp_sq",
];

fn stats(row: &SeriesRow) -> [Stat; 8] {
    [
        row.deviation_sq,
        row.mapped_deviation_sq,
        row.misfit_sq,
        row.misfit_par_sq,
        row.misfit_perp_sq,
        row.mapped_residual_sq,
        row.mapped_residual_par_sq,
        row.mapped_residual_perp_sq,
    ]
}

/// Header of the per-run time-series CSV.
pub fn series_header() -> Vec<String> {
    let mut h = vec!["t".to_string()];
    for name in STAT_COLUMNS {
        for suffix in ["mean", "min", "max"] {
            h.push(format!("{name}_{suffix}"));
        }
    }
    h.extend(["data_residual", "e_norm", "d_max"].map(String::from));
    h
}

fn csv_err(path: &Path, e: csv::Error) -> EkiError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => EkiError::io(path, io),
        other => EkiError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(format!("{other:?}")),
        },
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_series_csv(path: &Path, rows: &[SeriesRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(series_header()).map_err(|e| csv_err(path, e))?;
    for row in rows {
        let mut rec = vec![row.t.to_string()];
        for s in stats(row) {
            rec.extend([s.mean, s.min, s.max].map(|v| v.to_string()));
        }
        rec.extend([row.data_residual, row.e_norm, row.d_max].map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| EkiError::io(path, e))
}

pub fn read_series_csv(path: &Path) -> Result<Vec<SeriesRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(String::from)
        .collect();
    if header != series_header() {
        return Err(EkiError::InvalidInput(format!("{}: unexpected header", path.display())));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let vals = rec
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| EkiError::InvalidInput(format!("{}: {e}", path.display())))?;
        let stat = |i: usize| Stat {
            mean: vals[1 + 3 * i],
            min: vals[2 + 3 * i],
            max: vals[3 + 3 * i],
        };
        let tail = 1 + 3 * STAT_COLUMNS.len();
        rows.push(SeriesRow {
            t: vals[0],
            deviation_sq: stat(0),
            mapped_deviation_sq: stat(1),
            misfit_sq: stat(2),
            misfit_par_sq: stat(3),
            misfit_perp_sq: stat(4),
            mapped_residual_sq: stat(5),
            mapped_residual_par_sq: stat(6),
            mapped_residual_perp_sq: stat(7),
            data_residual: vals[tail],
            e_norm: vals[tail + 1],
            d_max: vals[tail + 2],
        });
    }
    Ok(rows)
}

#[derive(Serialize)]
struct Sidecar<'a> {
    config_hash: &'a str,
    ensemble_index: u64,
    noise_index: u64,
    stops: &'a [StopRecord],
    final_time: f64,
    final_error: f64,
    dim_par: usize,
    failure: &'a Option<String>,
    final_mean: &'a [f64],
    truth: &'a [f64],
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| EkiError::io(path, e))
}

pub fn run_stem(rec: &RunRecord) -> String {
    format!("run_e{:03}_n{:03}", rec.ensemble_index, rec.noise_index)
}

/// Writes `<stem>.csv`, `<stem>.json` and three SVG plots; returns the paths.
pub fn emit_run(rec: &RunRecord, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| EkiError::io(dir, e))?;
    let stem = run_stem(rec);
    let mut written = Vec::new();

    let csv_path = dir.join(format!("{stem}.csv"));
    write_series_csv(&csv_path, &rec.rows)?;
    written.push(csv_path);

    let json_path = dir.join(format!("{stem}.json"));
    let sidecar = Sidecar {
        config_hash: &rec.config_hash,
        ensemble_index: rec.ensemble_index,
        noise_index: rec.noise_index,
        stops: &rec.stops,
        final_time: rec.final_time,
        final_error: rec.final_error,
        dim_par: rec.dim_par,
        failure: &rec.failure,
        final_mean: &rec.final_mean,
        truth: &rec.truth,
    };
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| EkiError::InvalidInput(e.to_string()))?;
    write_text(&json_path, &(json + "\n"))?;
    written.push(json_path);

    let series = |label: &'static str, f: fn(&SeriesRow) -> f64| Series {
        label,
        points: rec.rows.iter().map(|r| (r.t, f(r))).collect(),
    };
    let plots = [
        (
            "collapse",
            "Ensemble collapse",
            vec![
                series("mean |e|^2", |r| r.deviation_sq.mean),
                series("mean |Ae|_G^2", |r| r.mapped_deviation_sq.mean),
            ],
        ),
        (
            "misfit",
            "Misfit components",
            vec![
                series("mean |misfit_par|_G^2", |r| r.misfit_par_sq.mean),
                series("mean |misfit_perp|_G^2", |r| r.misfit_perp_sq.mean),
                series("|A mean - y|", |r| r.data_residual),
            ],
        ),
        (
            "residual",
            "Mapped residual components",
            vec![
                series("mean |Ar_par|_G^2", |r| r.mapped_residual_par_sq.mean),
                series("mean |Ar_perp|_G^2", |r| r.mapped_residual_perp_sq.mean),
            ],
        ),
    ];
    for (suffix, title, s) in plots {
        let path = dir.join(format!("{stem}_{suffix}.svg"));
        write_text(&path, &loglog_plot(title, "t", &s))?;
        written.push(path);
    }
    Ok(written)
}

/// Writes every run, `summary.csv` and `failures.csv`.
pub fn emit_sweep(result: &SweepResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| EkiError::io(dir, e))?;
    let mut written = Vec::new();
    for rec in &result.records {
        written.extend(emit_run(rec, dir)?);
    }

    let path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record([
        "rule",
        "n_runs",
        "n_stopped",
        "time_q1",
        "time_median",
        "time_q3",
        "error_q1",
        "error_median",
        "error_q3",
    ])
    .map_err(|e| csv_err(&path, e))?;
    for row in summarize(&result.records) {
        let rec = [
            row.rule.clone(),
            row.n_runs.to_string(),
            row.n_stopped.to_string(),
            fmt_opt(row.time_q1),
            fmt_opt(row.time_median),
            fmt_opt(row.time_q3),
            fmt_opt(row.error_q1),
            fmt_opt(row.error_median),
            fmt_opt(row.error_q3),
        ];
        w.write_record(&rec).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| EkiError::io(&path, e))?;
    written.push(path);

    let path = dir.join("failures.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["ensemble_index", "noise_index", "message"])
        .map_err(|e| csv_err(&path, e))?;
    for f in &result.failures {
        w.write_record([f.ensemble_index.to_string(), f.noise_index.to_string(), f.message.clone()])
            .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| EkiError::io(&path, e))?;
    written.push(path);
    Ok(written)
}
