//! Train, evaluate and render an experiment configuration.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! data/train.csv, data/test.csv (+ .meta.json sidecars; data/ood.csv for regression)
//! models/<eu>.json
//! logs/<eu>.csv
//! grids/<eu>_<iu>_s<sigma>.csv
//! metrics.json
//! images/<eu>_<iu>_s<sigma>_<channel>.png   (two-moons only)
//! ```
//!
//! Every random stream is derived from the configured seed, so a rerun with
//! the same configuration reproduces every CSV and JSON byte for byte.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use uniunc_core::datasets::{toy_regression, two_moons, with_input_uncertainty, LabeledDataset, Labels};
use uniunc_core::network::Model;
use uniunc_core::training::{train, EpochLog, TrainConfig};
use uniunc_core::uncertainty::Realizations;
use uniunc_core::RngStream;

use crate::config::{EuName, ExperimentConfig, IuName, TaskKind};
use crate::error::{CliError, Result};
use crate::grid::{evaluate_point, grid_eval_with, EvalSettings, GridTable};
use crate::io::{load_dataset, load_model, save_dataset, save_model, save_training_log, write_json};
use crate::render::{channel_values, render_heatmap, value_range};
use crate::summary::{cell_key, summarize, Cell, CellMetrics};

const DATA_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;
const TRAIN_STREAM: u64 = 3;
const EVAL_STREAM: u64 = 4;
const CORRUPT_STREAM: u64 = 5;

/// Channels drawn for every two-moons cell.
pub const RENDER_CHANNELS: [&str; 5] = ["p_ale1", "p_inp1", "p_epi1", "var_inp1", "var_epi1"];

fn sub_seed(seed: u64, stream: u64) -> u64 {
    RngStream::new(seed, stream).next_u64()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    /// Toy regression only.
    pub ood: Option<LabeledDataset>,
}

pub fn make_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    Ok(match cfg.task {
        TaskKind::TwoMoons => Datasets {
            train: two_moons(cfg.n_train, cfg.train_noise, sub_seed(cfg.seed, DATA_STREAM))?,
            test: two_moons(cfg.n_test.max(2), cfg.train_noise, sub_seed(cfg.seed, TEST_STREAM))?,
            ood: None,
        },
        TaskKind::ToyRegression => {
            let (train, ood) = toy_regression(cfg.n_train, cfg.n_ood, sub_seed(cfg.seed, DATA_STREAM))?;
            let (test, _) = toy_regression(cfg.n_test.max(2), 1, sub_seed(cfg.seed, TEST_STREAM))?;
            Datasets {
                train,
                test,
                ood: Some(ood),
            }
        }
    })
}

pub fn train_config(cfg: &ExperimentConfig, eu: EuName) -> TrainConfig {
    TrainConfig {
        seed: RngStream::new(cfg.seed, TRAIN_STREAM).derive(eu.index()).next_u64(),
        ..cfg.train_config()
    }
}

/// Trains one model per configured EU method.
pub fn train_models(cfg: &ExperimentConfig, data: &Datasets) -> Result<Vec<(EuName, Model, Vec<EpochLog>)>> {
    cfg.eu_methods
        .par_iter()
        .map(|&eu| {
            let (model, log) = train(&cfg.model_spec(eu)?, &data.train, &train_config(cfg, eu))?;
            Ok((eu, model, log))
        })
        .collect()
}

fn metric_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::TwoMoons => "accuracy",
        TaskKind::ToyRegression => "rmse",
    }
}

fn data_path(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.output_dir.join("data").join(format!("{name}.csv"))
}

fn model_path(cfg: &ExperimentConfig, eu: EuName) -> PathBuf {
    cfg.output_dir.join("models").join(format!("{}.json", eu.name()))
}

pub fn grid_path(cfg: &ExperimentConfig, eu: EuName, iu: IuName, sigma: f64) -> PathBuf {
    cfg.output_dir.join("grids").join(format!("{}.csv", cell_key(eu, iu, sigma)))
}

pub fn metrics_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("metrics.json")
}

/// `train` subcommand: generates and saves the data, trains and saves every
/// model and its training log.
pub fn run_train(cfg: &ExperimentConfig) -> Result<Vec<(EuName, Model)>> {
    cfg.validate()?;
    let data = make_datasets(cfg)?;
    save_dataset(&data_path(cfg, "train"), &data.train)?;
    save_dataset(&data_path(cfg, "test"), &data.test)?;
    if let Some(ood) = &data.ood {
        save_dataset(&data_path(cfg, "ood"), ood)?;
    }
    let trained = train_models(cfg, &data)?;
    let mut models = Vec::new();
    for (eu, model, log) in trained {
        save_model(&model_path(cfg, eu), &model)?;
        save_training_log(
            &cfg.output_dir.join("logs").join(format!("{}.csv", eu.name())),
            &log,
            metric_name(cfg.task),
        )?;
        if let Some(last) = log.last() {
            eprintln!(
                "trained {:<14} loss {:.4}  train {} {:.4}",
                eu.name(),
                last.loss,
                metric_name(cfg.task),
                last.metric
            );
        }
        models.push((eu, model));
    }
    Ok(models)
}

pub fn settings(cfg: &ExperimentConfig) -> EvalSettings {
    EvalSettings {
        m_passes: cfg.m_passes,
        n_iu_samples: cfg.n_iu_samples,
        softmax_samples: cfg.softmax_samples,
    }
}

/// Held-out accuracy (classification, argmax of `μᵒ`) or RMSE of `μᵒ`
/// (regression) with input variance σ².
fn test_score(reals: &Realizations, iu: IuName, sigma: f64, test: &LabeledDataset, s: &EvalSettings, rng: &RngStream) -> Result<f64> {
    let rows = test
        .inputs
        .par_iter()
        .enumerate()
        .map(|(i, x)| evaluate_point(reals, iu, x, sigma, s, &rng.derive(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(match &test.labels {
        Labels::Classes(c) => {
            let hits = rows
                .iter()
                .zip(c)
                .filter(|(r, y)| {
                    let best = (0..r.mu.len()).fold(0, |b, k| if r.mu[k] > r.mu[b] { k } else { b });
                    best == **y
                })
                .count();
            hits as f64 / c.len() as f64
        }
        Labels::Targets(t) => {
            let sse: f64 = rows.iter().zip(t).map(|(r, y)| (r.mu[0] - y).powi(2)).sum();
            (sse / t.len() as f64).sqrt()
        }
    })
}

/// Evaluates every (iu-method, σ) cell for one trained model.
///
/// The model's realizations are drawn once and shared by every cell and
/// every grid point, and the input draws at a given point depend only on the
/// point, so cells differ only through σ and the propagation method.
pub fn evaluate_model(cfg: &ExperimentConfig, eu: EuName, model: &Model, test: &LabeledDataset) -> Result<Vec<Cell>> {
    let s = settings(cfg);
    let grid = cfg.grid();
    let rng = RngStream::new(cfg.seed, EVAL_STREAM).derive(eu.index());
    let reals = Realizations::sample(model, s.m_passes, &rng.derive(0))?;
    let mut cells = Vec::new();
    for &iu in &cfg.iu_methods {
        for sigma in cfg.sorted_sigmas() {
            let result = grid_eval_with(&reals, iu, sigma, &grid, &s, &rng.derive(1))?;
            let test_inputs = if cfg.corrupt_test {
                with_input_uncertainty(test, sigma, sub_seed(cfg.seed, CORRUPT_STREAM), true)?
            } else {
                test.clone()
            };
            let score = test_score(&reals, iu, sigma, &test_inputs, &s, &rng.derive(2))?;
            cells.push(Cell {
                eu,
                iu,
                sigma,
                grid: result,
                test_score: score,
            });
        }
    }
    Ok(cells)
}

/// Evaluates and writes every cell plus `metrics.json`.
pub fn evaluate_and_write(cfg: &ExperimentConfig, models: &[(EuName, Model)], test: &LabeledDataset) -> Result<(Vec<Cell>, BTreeMap<String, CellMetrics>)> {
    let mut cells = Vec::new();
    for (eu, model) in models {
        let mine = evaluate_model(cfg, *eu, model, test)?;
        for c in &mine {
            c.grid.write_csv(&grid_path(cfg, c.eu, c.iu, c.sigma))?;
        }
        eprintln!("evaluated {:<14} {} cells", eu.name(), mine.len());
        cells.extend(mine);
    }
    let metrics = summarize(&cells);
    write_json(&metrics_path(cfg), &metrics)?;
    Ok((cells, metrics))
}

/// `eval` subcommand: loads the saved models and test set.
pub fn run_eval(cfg: &ExperimentConfig) -> Result<Vec<Cell>> {
    cfg.validate()?;
    let test = load_dataset(&data_path(cfg, "test"))?;
    let models = cfg
        .eu_methods
        .iter()
        .map(|&eu| Ok((eu, load_model(&model_path(cfg, eu))?)))
        .collect::<Result<Vec<_>>>()?;
    for (eu, m) in &models {
        if m.spec != cfg.model_spec(*eu)? {
            return Err(CliError::Config(vec![format!(
                "models/{}.json was trained with a different model configuration",
                eu.name()
            )]));
        }
    }
    Ok(evaluate_and_write(cfg, &models, &test)?.0)
}

/// `render` subcommand: heatmaps for every two-moons cell, normalized per
/// (eu, iu, channel) across σ levels. Returns the written paths; toy
/// regression produces none.
pub fn run_render(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    if cfg.task != TaskKind::TwoMoons {
        eprintln!("render: no heatmaps for {}", cfg.task);
        return Ok(Vec::new());
    }
    let train = load_dataset(&data_path(cfg, "train"))?;
    let overlay: Vec<([f64; 2], usize)> = match &train.labels {
        Labels::Classes(c) => train.inputs.iter().zip(c).map(|(x, y)| ([x[0], x[1]], *y)).collect(),
        Labels::Targets(_) => Vec::new(),
    };
    let mut written = Vec::new();
    for &eu in &cfg.eu_methods {
        for &iu in &cfg.iu_methods {
            let sigmas = cfg.sorted_sigmas();
            let tables = sigmas
                .iter()
                .map(|&s| GridTable::read(&grid_path(cfg, eu, iu, s)))
                .collect::<Result<Vec<_>>>()?;
            for channel in RENDER_CHANNELS {
                let all: Vec<f64> = tables
                    .iter()
                    .filter_map(|t| channel_values(t, channel))
                    .flatten()
                    .collect();
                let range = value_range(&all);
                for (t, &s) in tables.iter().zip(&sigmas) {
                    let path = image_path(cfg, eu, iu, s, channel);
                    render_heatmap(t, channel, Some(range), &overlay, &path)?;
                    written.push(path);
                }
            }
        }
    }
    eprintln!("rendered {} images", written.len());
    Ok(written)
}

pub fn image_path(cfg: &ExperimentConfig, eu: EuName, iu: IuName, sigma: f64, channel: &str) -> PathBuf {
    cfg.output_dir
        .join("images")
        .join(format!("{}_{channel}.png", cell_key(eu, iu, sigma)))
}

/// `sweep`: train, evaluate and (optionally) render.
pub fn run_sweep(cfg: &ExperimentConfig, render: bool) -> Result<Vec<Cell>> {
    cfg.validate()?;
    let models = run_train(cfg)?;
    let test = load_dataset(&data_path(cfg, "test"))?;
    let (cells, _) = evaluate_and_write(cfg, &models, &test)?;
    if render {
        run_render(cfg)?;
    }
    Ok(cells)
}

/// `all`: a sweep per task, each in its own subdirectory. A configured grid
/// is kept only for the task whose input dimension it matches.
pub fn run_all(cfg: &ExperimentConfig, render: bool) -> Result<()> {
    for task in [TaskKind::TwoMoons, TaskKind::ToyRegression] {
        let mut sub = cfg.clone();
        sub.task = task;
        sub.output_dir = cfg.output_dir.join(task.name());
        if sub.grid.as_ref().is_some_and(|g| g.bounds.len() != task.input_dim()) {
            sub.grid = None;
        }
        run_sweep(&sub, render)?;
    }
    Ok(())
}
