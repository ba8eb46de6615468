use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::eval::{CurveRow, EvalReport, Metric};
use super::train::{LogRecord, SweepRow};
use super::{io_error, RunError};

/// Contents of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub metric: Metric,
    pub mean: f64,
    pub ci95: f64,
    pub episodes: usize,
    pub values: Vec<f64>,
    pub config: ExperimentConfig,
}

impl ReportFile {
    pub fn new(report: &EvalReport, config: &ExperimentConfig) -> Self {
        Self {
            metric: report.metric,
            mean: report.mean,
            ci95: report.ci95,
            episodes: report.episodes,
            values: report.values.clone(),
            config: config.clone(),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, RunError> {
    File::create(path).map(BufWriter::new).map_err(io_error(path))
}

/// One JSON object per line.
pub fn write_metrics(path: &Path, log: &[LogRecord]) -> Result<(), RunError> {
    let mut w = create(path)?;
    for rec in log {
        let line = serde_json::to_string(rec).expect("log records serialize");
        writeln!(w, "{line}").map_err(io_error(path))?;
    }
    w.flush().map_err(io_error(path))
}

pub fn write_report(path: &Path, report: &EvalReport, config: &ExperimentConfig) -> Result<(), RunError> {
    let body = serde_json::to_vec_pretty(&ReportFile::new(report, config)).expect("reports serialize");
    std::fs::write(path, body).map_err(io_error(path))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(io_error(path))
}

fn csv_error(path: &Path, e: csv::Error) -> RunError {
    RunError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

/// Columns `D,metric,ci95`.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), RunError> {
    write_csv(path, rows)
}

/// Columns `task,x,y_true,y_pred`.
pub fn write_curve_csv(path: &Path, rows: &[CurveRow]) -> Result<(), RunError> {
    write_csv(path, rows)
}
