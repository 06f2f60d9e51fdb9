//! Decomposition over an input grid and the grid CSV format.
//!
//! Column order (classification with `C` classes, shown for `C = 2`):
//!
//! ```text
//! x1,x2,mu0,mu1,var_ale0,var_ale1,var_inp0,var_inp1,var_epi0,var_epi1,p_ale0,p_ale1,p_inp0,p_inp1,p_epi0,p_epi1,passes
//! ```
//!
//! and for regression `x,mu,var_ale,var_inp,var_epi,passes`. Uncertainty
//! columns are variances. For classification `var_ale` is the Bernoulli
//! variance `p_ale (1 − p_ale)` of each class.

use std::path::Path;

use rayon::prelude::*;
use uniunc_core::network::{Model, Task};
use uniunc_core::uncertainty::{classify, regress, ClassProbabilities, InputWithUncertainty, Realizations};
use uniunc_core::{RngStream, Vector};

use crate::config::{GridSpec, IuName};
use crate::error::{CliError, Result};
use crate::io::{parse_f64, write_file};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalSettings {
    pub m_passes: usize,
    pub n_iu_samples: usize,
    pub softmax_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub coords: Vec<f64>,
    pub mu: Vec<f64>,
    pub var_ale: Vec<f64>,
    pub var_inp: Vec<f64>,
    pub var_epi: Vec<f64>,
    /// Classification only.
    pub probs: Option<ClassProbabilities>,
    pub passes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub task: Task,
    pub grid: GridSpec,
    pub rows: Vec<GridRow>,
}

/// Decomposition of one input under a fixed set of realizations. `rng`
/// supplies the Monte Carlo input draws and the sampling-softmax draws.
pub fn evaluate_point(
    reals: &Realizations,
    iu: IuName,
    x: &[f64],
    sigma: f64,
    settings: &EvalSettings,
    rng: &RngStream,
) -> Result<GridRow> {
    let input = InputWithUncertainty::isotropic(Vector::from(x), sigma * sigma)?;
    let d = match iu {
        IuName::Taylor => reals.taylor(&input)?,
        IuName::Mc => reals.monte_carlo(&input, settings.n_iu_samples, &rng.derive(0))?,
    };
    let row = match d.task {
        Task::Classification { .. } => {
            let probs = classify(&d, settings.softmax_samples, &mut rng.derive(1))?;
            GridRow {
                coords: x.to_vec(),
                var_ale: probs.ale_variance().to_vec(),
                mu: d.mu.to_vec(),
                var_inp: d.var_inp.to_vec(),
                var_epi: d.var_epi.to_vec(),
                probs: Some(probs),
                passes: d.forward_passes,
            }
        }
        Task::Regression => {
            let r = regress(&d)?;
            GridRow {
                coords: x.to_vec(),
                mu: vec![r.mean],
                var_ale: vec![r.var_ale],
                var_inp: vec![r.var_inp],
                var_epi: vec![r.var_epi],
                probs: None,
                passes: d.forward_passes,
            }
        }
    };
    Ok(row)
}

/// Evaluates the decomposition at every grid point with input variance σ²
/// on each feature.
///
/// The realizations are drawn once from `rng.derive(0)` and shared by every
/// point; point `i` takes its input and softmax draws from
/// `rng.derive(1).derive(i)`. Points are evaluated in parallel and returned
/// in grid order.
pub fn grid_eval(
    model: &Model,
    iu: IuName,
    sigma: f64,
    grid: &GridSpec,
    settings: &EvalSettings,
    rng: &RngStream,
) -> Result<GridResult> {
    let reals = Realizations::sample(model, settings.m_passes, &rng.derive(0))?;
    grid_eval_with(&reals, iu, sigma, grid, settings, &rng.derive(1))
}

/// [`grid_eval`] with the realizations supplied; point `i` draws from
/// `points.derive(i)`.
pub fn grid_eval_with(
    reals: &Realizations,
    iu: IuName,
    sigma: f64,
    grid: &GridSpec,
    settings: &EvalSettings,
    points: &RngStream,
) -> Result<GridResult> {
    let rows = (0..grid.len())
        .into_par_iter()
        .map(|i| evaluate_point(reals, iu, &grid.point(i), sigma, settings, &points.derive(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(GridResult {
        task: reals.task(),
        grid: grid.clone(),
        rows,
    })
}

pub fn csv_header(task: Task, dim: usize) -> Vec<String> {
    match task {
        Task::Classification { classes } => {
            let mut h: Vec<String> = (1..=dim).map(|i| format!("x{i}")).collect();
            for name in ["mu", "var_ale", "var_inp", "var_epi", "p_ale", "p_inp", "p_epi"] {
                h.extend((0..classes).map(|c| format!("{name}{c}")));
            }
            h.push("passes".into());
            h
        }
        Task::Regression => {
            let mut h: Vec<String> = if dim == 1 {
                vec!["x".into()]
            } else {
                (1..=dim).map(|i| format!("x{i}")).collect()
            };
            h.extend(["mu", "var_ale", "var_inp", "var_epi", "passes"].map(String::from));
            h
        }
    }
}

impl GridResult {
    pub fn to_csv(&self) -> String {
        let dim = self.grid.bounds.len();
        let mut out = csv_header(self.task, dim).join(",");
        out.push('\n');
        let mut fields: Vec<String> = Vec::new();
        for r in &self.rows {
            fields.clear();
            let channels: Vec<&[f64]> = match &r.probs {
                Some(p) => vec![&r.mu, &r.var_ale, &r.var_inp, &r.var_epi, &p.ale, &p.inp, &p.epi],
                None => vec![&r.mu, &r.var_ale, &r.var_inp, &r.var_epi],
            };
            fields.extend(r.coords.iter().map(f64::to_string));
            for ch in channels {
                fields.extend(ch.iter().map(f64::to_string));
            }
            fields.push(r.passes.to_string());
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_csv().as_bytes())
    }

    /// Grid mean of a per-point scalar.
    pub fn mean_of(&self, f: impl Fn(&GridRow) -> f64) -> f64 {
        self.rows.iter().map(f).sum::<f64>() / self.rows.len() as f64
    }
}

/// A grid CSV read back as named numeric columns.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl GridTable {
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| CliError::csv(path, e))?;
        let headers: Vec<String> = r
            .headers()
            .map_err(|e| CliError::csv(path, e))?
            .iter()
            .map(String::from)
            .collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| CliError::csv(path, e))?;
            rows.push(rec.iter().map(|s| parse_f64(path, s)).collect::<Result<Vec<_>>>()?);
        }
        Ok(Self { headers, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.headers.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    /// Distinct values of a coordinate column in order of first appearance.
    pub fn axis(&self, name: &str) -> Option<Vec<f64>> {
        let col = self.column(name)?;
        let mut seen: Vec<f64> = Vec::new();
        for v in col {
            if !seen.iter().any(|s| s.to_bits() == v.to_bits()) {
                seen.push(v);
            }
        }
        Some(seen)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use uniunc_core::network::{EuMethod, ModelSpec};

    fn model(eu: EuMethod, task: Task) -> Model {
        let input = if task == Task::Regression { 1 } else { 2 };
        Model::init(ModelSpec::mlp(input, &[8, 8, 8], task, eu).unwrap(), &RngStream::new(3, 0))
    }

    const SETTINGS: EvalSettings = EvalSettings {
        m_passes: 4,
        n_iu_samples: 6,
        softmax_samples: 10,
    };

    fn moons_grid(res: usize) -> GridSpec {
        GridSpec {
            bounds: vec![[-2.0, 3.0], [-1.5, 2.0]],
            resolution: vec![res, res],
        }
    }

    #[test]
    fn hundred_by_hundred_grid_has_ten_thousand_rows() {
        let m = model(EuMethod::None, Task::Classification { classes: 2 });
        let g = grid_eval(&m, IuName::Taylor, 0.5, &moons_grid(100), &SETTINGS, &RngStream::new(0, 0)).unwrap();
        assert_eq!(g.rows.len(), 10_000);
        assert_eq!(g.to_csv().lines().count(), 10_001);
    }

    #[test]
    fn zero_sigma_taylor_has_zero_input_variance() {
        let m = model(EuMethod::None, Task::Classification { classes: 2 });
        let g = grid_eval(&m, IuName::Taylor, 0.0, &moons_grid(10), &SETTINGS, &RngStream::new(0, 0)).unwrap();
        assert!(g.rows.iter().all(|r| r.var_inp.iter().all(|v| *v == 0.0)));
        assert!(g.rows.iter().all(|r| r.var_epi.iter().all(|v| *v == 0.0)));
        let g = grid_eval(&m, IuName::Mc, 0.0, &moons_grid(10), &SETTINGS, &RngStream::new(0, 0)).unwrap();
        assert!(g.rows.iter().all(|r| r.var_inp.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn passes_column_counts_forward_passes() {
        for (eu, m_eff) in [(EuMethod::McDropout { p: 0.2 }, 4), (EuMethod::Ensemble { members: 3 }, 3)] {
            let m = model(eu, Task::Classification { classes: 2 });
            let t = grid_eval(&m, IuName::Taylor, 0.5, &moons_grid(4), &SETTINGS, &RngStream::new(0, 0)).unwrap();
            assert!(t.rows.iter().all(|r| r.passes == m_eff));
            let mc = grid_eval(&m, IuName::Mc, 0.5, &moons_grid(4), &SETTINGS, &RngStream::new(0, 0)).unwrap();
            assert!(mc.rows.iter().all(|r| r.passes == 6 * m_eff));
        }
    }

    #[test]
    fn csv_headers_are_fixed() {
        assert_eq!(
            csv_header(Task::Classification { classes: 2 }, 2).join(","),
            "x1,x2,mu0,mu1,var_ale0,var_ale1,var_inp0,var_inp1,var_epi0,var_epi1,p_ale0,p_ale1,p_inp0,p_inp1,p_epi0,p_epi1,passes"
        );
        assert_eq!(csv_header(Task::Regression, 1).join(","), "x,mu,var_ale,var_inp,var_epi,passes");
    }

    #[test]
    fn csv_round_trips_through_table() {
        let dir = tempfile::tempdir().unwrap();
        let m = model(EuMethod::McDropout { p: 0.2 }, Task::Regression);
        let grid = GridSpec {
            bounds: vec![[0.0, 12.0]],
            resolution: vec![25],
        };
        let g = grid_eval(&m, IuName::Mc, 0.25, &grid, &SETTINGS, &RngStream::new(0, 0)).unwrap();
        let path = dir.path().join("g.csv");
        g.write_csv(&path).unwrap();
        let t = GridTable::read(&path).unwrap();
        assert_eq!(t.rows.len(), 25);
        let var_epi = t.column("var_epi").unwrap();
        for (a, r) in var_epi.iter().zip(&g.rows) {
            assert_eq!(a.to_bits(), r.var_epi[0].to_bits());
        }
        assert_eq!(t.axis("x").unwrap().len(), 25);
    }

    #[test]
    fn grid_eval_is_deterministic() {
        let m = model(EuMethod::Flipout { prior_variance: 1.0 }, Task::Classification { classes: 2 });
        let a = grid_eval(&m, IuName::Mc, 0.5, &moons_grid(6), &SETTINGS, &RngStream::new(5, 5)).unwrap();
        let b = grid_eval(&m, IuName::Mc, 0.5, &moons_grid(6), &SETTINGS, &RngStream::new(5, 5)).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
    }
}
