//! Per-cell metrics and monotonicity verdicts across σ levels.

use std::collections::BTreeMap;

use serde::{Serialize, Serializer};
use uniunc_core::network::Task;

use crate::config::{EuName, IuName};
use crate::grid::{GridResult, GridRow};

/// One evaluated (eu-method, iu-method, σ) combination.
#[derive(Debug, Clone)]
pub struct Cell {
    pub eu: EuName,
    pub iu: IuName,
    pub sigma: f64,
    pub grid: GridResult,
    /// Held-out accuracy (classification) or RMSE (regression).
    pub test_score: f64,
}

impl Cell {
    pub fn key(&self) -> String {
        cell_key(self.eu, self.iu, self.sigma)
    }
}

pub fn cell_key(eu: EuName, iu: IuName, sigma: f64) -> String {
    format!("{}_{}_s{}", eu.name(), iu.name(), sigma)
}

/// Whether a grid-mean channel strictly increases with σ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Increasing,
    NotIncreasing,
    InsufficientLevels,
}

impl Verdict {
    pub fn from_series(values: &[f64]) -> Self {
        if values.len() < 2 {
            Verdict::InsufficientLevels
        } else if values.windows(2).all(|w| w[1] > w[0]) {
            Verdict::Increasing
        } else {
            Verdict::NotIncreasing
        }
    }
}

impl Serialize for Verdict {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Verdict::Increasing => s.serialize_bool(true),
            Verdict::NotIncreasing => s.serialize_bool(false),
            Verdict::InsufficientLevels => s.serialize_str("insufficient levels"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionMetrics {
    pub rmse: f64,
    /// Grid mean of σ²_epi on the training range `[0, 10]`.
    pub mean_var_epi_in_distribution: f64,
    /// Grid mean of σ²_epi on `[10, 12]`.
    pub mean_var_epi_ood: f64,
    /// Grid mean of σ²_ale on each third of `[0, 10]`.
    pub mean_var_ale_tertiles: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellMetrics {
    pub eu: &'static str,
    pub iu: &'static str,
    pub sigma: f64,
    /// Classification only.
    pub accuracy: Option<f64>,
    pub mean_var_ale: f64,
    pub mean_var_inp: f64,
    pub mean_var_epi: f64,
    pub monotone_inp: Verdict,
    pub monotone_epi: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regression: Option<RegressionMetrics>,
}

fn channel_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Grid mean of a variance channel, averaged over classes.
fn grid_mean(g: &GridResult, ch: fn(&GridRow) -> &[f64]) -> f64 {
    g.mean_of(|r| channel_mean(ch(r)))
}

fn range_mean(g: &GridResult, lo: f64, hi: f64, ch: fn(&GridRow) -> &[f64]) -> f64 {
    let vals: Vec<f64> = g
        .rows
        .iter()
        .filter(|r| r.coords[0] >= lo && r.coords[0] <= hi)
        .map(|r| ch(r)[0])
        .collect();
    if vals.is_empty() {
        f64::NAN
    } else {
        channel_mean(&vals)
    }
}

fn regression_metrics(cell: &Cell) -> RegressionMetrics {
    let g = &cell.grid;
    let t = 10.0 / 3.0;
    RegressionMetrics {
        rmse: cell.test_score,
        mean_var_epi_in_distribution: range_mean(g, 0.0, 10.0, |r| &r.var_epi),
        mean_var_epi_ood: range_mean(g, 10.0, 12.0, |r| &r.var_epi),
        mean_var_ale_tertiles: [
            range_mean(g, 0.0, t, |r| &r.var_ale),
            range_mean(g, t, 2.0 * t, |r| &r.var_ale),
            range_mean(g, 2.0 * t, 10.0, |r| &r.var_ale),
        ],
    }
}

/// Metrics keyed by `<eu>_<iu>_s<sigma>`, the same stem as the grid CSV
/// file names. Verdicts compare cells with equal methods ordered by σ.
pub fn summarize(cells: &[Cell]) -> BTreeMap<String, CellMetrics> {
    let mut out = BTreeMap::new();
    for cell in cells {
        let mut series: Vec<(f64, f64, f64)> = cells
            .iter()
            .filter(|c| c.eu == cell.eu && c.iu == cell.iu)
            .map(|c| (c.sigma, grid_mean(&c.grid, |r| &r.var_inp), grid_mean(&c.grid, |r| &r.var_epi)))
            .collect();
        series.sort_by(|a, b| a.0.total_cmp(&b.0));
        series.dedup_by(|a, b| a.0 == b.0);
        let inp: Vec<f64> = series.iter().map(|s| s.1).collect();
        let epi: Vec<f64> = series.iter().map(|s| s.2).collect();
        let classification = matches!(cell.grid.task, Task::Classification { .. });
        out.insert(
            cell.key(),
            CellMetrics {
                eu: cell.eu.name(),
                iu: cell.iu.name(),
                sigma: cell.sigma,
                accuracy: classification.then_some(cell.test_score),
                mean_var_ale: grid_mean(&cell.grid, |r| &r.var_ale),
                mean_var_inp: grid_mean(&cell.grid, |r| &r.var_inp),
                mean_var_epi: grid_mean(&cell.grid, |r| &r.var_epi),
                monotone_inp: Verdict::from_series(&inp),
                monotone_epi: Verdict::from_series(&epi),
                regression: (!classification).then(|| regression_metrics(cell)),
            },
        );
    }
    out
}
