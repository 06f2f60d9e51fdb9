//! On-disk formats: model checkpoints, dataset dumps and training logs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use uniunc_core::datasets::{DatasetMeta, LabeledDataset, Labels};
use uniunc_core::network::Model;
use uniunc_core::training::EpochLog;
use uniunc_core::Vector;

use crate::error::{CliError, Result};

pub const CHECKPOINT_FORMAT: &str = "uniunc-model";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::json(path, e))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_file(path)?).map_err(|e| CliError::json(path, e))
}

#[derive(Serialize, Deserialize)]
struct Checkpoint<M> {
    format: String,
    version: u32,
    model: M,
}

/// JSON checkpoint holding the spec and every member's parameters. Floats are
/// written in shortest round-trip form, so a load reproduces the model
/// bit for bit.
pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    write_json(
        path,
        &Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model,
        },
    )
}

pub fn load_model(path: &Path) -> Result<Model> {
    let ck: Checkpoint<Model> = read_json(path)?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(CliError::format(
            path,
            format!("unsupported checkpoint {} v{}", ck.format, ck.version),
        ));
    }
    ck.model.validate().map_err(|e| CliError::format(path, e))?;
    Ok(ck.model)
}

#[derive(Serialize, Deserialize)]
struct DatasetSidecar {
    generator: String,
    params: std::collections::BTreeMap<String, f64>,
    seed: u64,
    input_var: Option<Vec<f64>>,
}

fn sidecar_path(csv: &Path) -> std::path::PathBuf {
    csv.with_extension("meta.json")
}

/// Writes `x1,x2,label` (classification) or `x,y` (regression) rows plus a
/// `<name>.meta.json` sidecar with the generator metadata.
pub fn save_dataset(path: &Path, ds: &LabeledDataset) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::csv(path, e))?;
    let dim = ds.input_dim();
    let mut header: Vec<String> = match &ds.labels {
        Labels::Classes(_) => (1..=dim).map(|i| format!("x{i}")).collect(),
        Labels::Targets(_) if dim == 1 => vec!["x".to_string()],
        Labels::Targets(_) => (1..=dim).map(|i| format!("x{i}")).collect(),
    };
    header.push(match &ds.labels {
        Labels::Classes(_) => "label".to_string(),
        Labels::Targets(_) => "y".to_string(),
    });
    w.write_record(&header).map_err(|e| CliError::csv(path, e))?;
    for (i, x) in ds.inputs.iter().enumerate() {
        let mut row: Vec<String> = x.iter().map(f64::to_string).collect();
        row.push(match &ds.labels {
            Labels::Classes(c) => c[i].to_string(),
            Labels::Targets(t) => t[i].to_string(),
        });
        w.write_record(&row).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    write_json(
        &sidecar_path(path),
        &DatasetSidecar {
            generator: ds.meta.generator.clone(),
            params: ds.meta.params.clone(),
            seed: ds.meta.seed,
            input_var: ds.input_var.as_ref().map(|v| v.to_vec()),
        },
    )
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::csv(path, e))?;
    let header = r.headers().map_err(|e| CliError::csv(path, e))?.clone();
    let last = header.len().checked_sub(1).ok_or_else(|| CliError::format(path, "empty header"))?;
    let classification = match &header[last] {
        "label" => true,
        "y" => false,
        other => return Err(CliError::format(path, format!("unknown label column `{other}`"))),
    };
    let mut inputs = Vec::new();
    let mut classes = Vec::new();
    let mut targets = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::csv(path, e))?;
        let x = (0..last)
            .map(|i| parse_f64(path, &rec[i]))
            .collect::<Result<Vec<_>>>()?;
        inputs.push(Vector::from(x));
        if classification {
            classes.push(rec[last].parse::<usize>().map_err(|e| CliError::format(path, e))?);
        } else {
            targets.push(parse_f64(path, &rec[last])?);
        }
    }
    let side: DatasetSidecar = read_json(&sidecar_path(path))?;
    let labels = if classification {
        Labels::Classes(classes)
    } else {
        Labels::Targets(targets)
    };
    let meta = DatasetMeta {
        generator: side.generator,
        params: side.params,
        seed: side.seed,
    };
    LabeledDataset::new(inputs, labels, side.input_var.map(Vector::from), meta).map_err(|e| CliError::format(path, e))
}

pub(crate) fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|e| CliError::format(path, format!("bad number `{s}`: {e}")))
}

/// `epoch,loss,accuracy` or `epoch,loss,rmse`.
pub fn save_training_log(path: &Path, log: &[EpochLog], metric_name: &str) -> Result<()> {
    let mut text = format!("epoch,loss,{metric_name}\n");
    for e in log {
        text.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.metric));
    }
    write_file(path, text.as_bytes())
}
