use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{load_data, run_with_data, ExperimentConfig};
use crate::error::{Error, Result};
use crate::tensor::RngStream;

/// Aggregate of the repeats at one axis value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub runs: usize,
    pub mean_accuracy: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std_accuracy: f64,
    pub mean_e_w: Option<f64>,
}

/// Sets the dotted field `axis` (e.g. `schedule.pnr`, `schedule.rules.0.theta`)
/// to `value`, keeping the field's existing TOML type.
pub fn apply_axis(base: &ExperimentConfig, axis: &str, value: &str) -> Result<ExperimentConfig> {
    let mut tree =
        toml::Value::try_from(base).map_err(|e| Error::config("<root>", e.to_string()))?;
    let mut slot = &mut tree;
    for part in axis.split('.') {
        slot = match slot {
            toml::Value::Table(t) => t.get_mut(part),
            toml::Value::Array(a) => part.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::config(axis, "no such field"))?;
    }
    let bad = |kind: &str| Error::config(axis, format!("`{value}` is not a valid {kind}"));
    *slot = match slot {
        toml::Value::Integer(_) => toml::Value::Integer(value.parse().map_err(|_| bad("integer"))?),
        toml::Value::Float(_) => toml::Value::Float(value.parse().map_err(|_| bad("number"))?),
        toml::Value::Boolean(_) => toml::Value::Boolean(value.parse().map_err(|_| bad("boolean"))?),
        toml::Value::String(_) => toml::Value::String(value.to_string()),
        _ => return Err(Error::config(axis, "only scalar fields can be swept")),
    };
    let cfg: ExperimentConfig = tree
        .try_into()
        .map_err(|e: toml::de::Error| Error::config(axis, e.message().to_string()))?;
    cfg.validate_static()?;
    Ok(cfg)
}

fn repeat_seed(base: u64, r: usize) -> u64 {
    if r == 0 {
        base
    } else {
        RngStream::new(base).derive(r as u64).next_u64() >> 1
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.=".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// One run per value and repeat, under `<root>/<name>-sweep/`, plus
/// `sweep.csv` with `value,runs,mean_accuracy,std_accuracy,mean_e_w`.
/// Repeat 0 uses the configured seed; later repeats derive theirs from it.
pub fn sweep(
    base: &ExperimentConfig,
    axis: &str,
    values: &[String],
    repeats: usize,
) -> Result<(PathBuf, Vec<SweepRow>)> {
    if values.is_empty() {
        return Err(Error::config("values", "sweep needs at least one value"));
    }
    if repeats == 0 {
        return Err(Error::config("repeats", "must be >= 1"));
    }
    let configs = values
        .iter()
        .map(|v| apply_axis(base, axis, v))
        .collect::<Result<Vec<_>>>()?;
    base.validate()?;
    let (train, test) = load_data(base)?;
    let root = base.output_root().join(format!("{}-sweep", base.name));
    fs::create_dir_all(&root)?;

    let mut rows = Vec::new();
    for (value, cfg) in values.iter().zip(configs) {
        let mut accs = Vec::new();
        let mut e_ws = Vec::new();
        for r in 0..repeats {
            let mut c = cfg.clone();
            c.seed = repeat_seed(base.seed, r);
            let id = sanitize(&format!("{axis}={value}-r{r}"));
            c.output.run_id = Some(id.clone());
            let s = run_with_data(&c, &train, &test, &root.join(&id))?;
            accs.push(s.final_accuracy.unwrap_or(f64::NAN));
            if let Some(e) = s.mean_e_w {
                e_ws.push(e);
            }
        }
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let std = if accs.len() > 1 {
            (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        rows.push(SweepRow {
            value: value.clone(),
            runs: accs.len(),
            mean_accuracy: mean,
            std_accuracy: std,
            mean_e_w: (!e_ws.is_empty()).then(|| e_ws.iter().sum::<f64>() / e_ws.len() as f64),
        });
    }
    let mut w = csv::Writer::from_path(root.join("sweep.csv"))
        .map_err(|e| Error::format(0, e.to_string()))?;
    for row in &rows {
        w.serialize(row)
            .map_err(|e| Error::format(0, e.to_string()))?;
    }
    w.flush()?;
    Ok((root, rows))
}
