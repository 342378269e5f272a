//! Evaluation metrics: MAE, RMSE, MAPE (SOH) and MedAE (RUL), plus the
//! per-cycle signed error series used by plot tooling.

use std::fmt;
use std::path::Path;

use crate::dataio;
use crate::error::{Error, Result};

/// Which prediction task a metric row describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Soh,
    Rul,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Soh => "soh",
            Task::Rul => "rul",
        })
    }
}

/// Metrics for one cell and task.
///
/// `mape_or_medae` holds MAPE in percent for SOH rows and the median
/// absolute error for RUL rows, mirroring the report CSV column.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub cell_id: String,
    pub task: Task,
    pub mae: f64,
    pub rmse: f64,
    pub mape_or_medae: f64,
    pub n: usize,
}

impl MetricsReport {
    /// MAPE in percent; present only for SOH rows.
    pub fn mape(&self) -> Option<f64> {
        (self.task == Task::Soh).then_some(self.mape_or_medae)
    }

    /// MAPE as a raw ratio (percent / 100); present only for SOH rows.
    pub fn mape_ratio(&self) -> Option<f64> {
        self.mape().map(|p| p / 100.0)
    }

    /// Median absolute error; present only for RUL rows.
    pub fn medae(&self) -> Option<f64> {
        (self.task == Task::Rul).then_some(self.mape_or_medae)
    }
}

/// MAE, RMSE and the task-specific third metric over one series pair.
///
/// SOH rows report MAPE in percent and require every true value to be
/// nonzero; RUL rows report the median absolute error, averaging the two
/// middle values for even lengths.
pub fn compute_metrics(
    y: &[f64],
    yhat: &[f64],
    task: Task,
    cell_id: &str,
) -> Result<MetricsReport> {
    if y.is_empty() || y.len() != yhat.len() {
        return Err(Error::Usage(format!(
            "metrics need equal nonzero series lengths, got {} and {}",
            y.len(),
            yhat.len()
        )));
    }
    let n = y.len();
    let abs_err: Vec<f64> = y.iter().zip(yhat).map(|(a, b)| (b - a).abs()).collect();
    let mae = abs_err.iter().sum::<f64>() / n as f64;
    let rmse = (abs_err.iter().map(|e| e * e).sum::<f64>() / n as f64).sqrt();
    let third = match task {
        Task::Soh => {
            let zeros: Vec<usize> =
                (0..n).filter(|&i| y[i] == 0.0).collect();
            if !zeros.is_empty() {
                return Err(Error::Data(format!(
                    "MAPE undefined: zero true values at indices {zeros:?}"
                )));
            }
            abs_err.iter().zip(y).map(|(e, t)| e / t.abs()).sum::<f64>() / n as f64 * 100.0
        }
        Task::Rul => {
            let mut sorted = abs_err.clone();
            sorted.sort_by(f64::total_cmp);
            if n % 2 == 1 {
                sorted[n / 2]
            } else {
                (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
            }
        }
    };
    Ok(MetricsReport { cell_id: cell_id.to_string(), task, mae, rmse, mape_or_medae: third, n })
}

/// Signed SOH error series in percent: `(real - predicted) / real * 100`
/// per cycle, over capacities.
pub fn soh_error_series(c_real: &[f64], c_pre: &[f64]) -> Result<Vec<f64>> {
    if c_real.len() != c_pre.len() {
        return Err(Error::Usage(format!(
            "series lengths differ: {} vs {}",
            c_real.len(),
            c_pre.len()
        )));
    }
    let zeros: Vec<usize> = (0..c_real.len()).filter(|&i| c_real[i] == 0.0).collect();
    if !zeros.is_empty() {
        return Err(Error::Data(format!(
            "SOH error undefined: zero real capacity at indices {zeros:?}"
        )));
    }
    Ok(c_real.iter().zip(c_pre).map(|(r, p)| (r - p) / r * 100.0).collect())
}

/// Signed RUL error series in cycles: `real - predicted` per cycle.
pub fn rul_error_series(rul_real: &[f64], rul_pre: &[f64]) -> Result<Vec<f64>> {
    if rul_real.len() != rul_pre.len() {
        return Err(Error::Usage(format!(
            "series lengths differ: {} vs {}",
            rul_real.len(),
            rul_pre.len()
        )));
    }
    Ok(rul_real.iter().zip(rul_pre).map(|(r, p)| r - p).collect())
}

/// Write report rows as CSV `cell,task,mae,rmse,mape_or_medae,n`.
pub fn write_report_csv(path: &Path, rows: &[MetricsReport]) -> Result<()> {
    let mut w = dataio::csv_writer(path)?;
    dataio::write_rec(&mut w, path, &["cell", "task", "mae", "rmse", "mape_or_medae", "n"])?;
    for r in rows {
        dataio::write_rec(
            &mut w,
            path,
            &[
                r.cell_id.clone(),
                r.task.to_string(),
                r.mae.to_string(),
                r.rmse.to_string(),
                r.mape_or_medae.to_string(),
                r.n.to_string(),
            ],
        )?;
    }
    dataio::finish_csv(w, path)
}
