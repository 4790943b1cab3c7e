use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ModelGraph, ModelKind};
use crate::tensor::{read_tensor_file, write_tensor_file, RngStream, Tensor};

pub const CHECKPOINT_MANIFEST: &str = "manifest.txt";

/// Parameters of one model snapshot, in model order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelKind,
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn capture(kind: ModelKind, step: u64, model: &ModelGraph) -> Checkpoint {
        Checkpoint {
            model: kind,
            step,
            params: model
                .named_params()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuilds the architecture and installs the stored parameters.
    pub fn to_model(&self) -> Result<ModelGraph> {
        let mut model = self.model.build(&mut RngStream::new(0))?;
        let expected = model.named_params().len();
        if expected != self.params.len() {
            return Err(Error::format(
                0,
                format!(
                    "checkpoint has {} parameters, {} expects {expected}",
                    self.params.len(),
                    self.model.name()
                ),
            ));
        }
        for (name, t) in &self.params {
            model.set_param(name, t.clone())?;
        }
        Ok(model)
    }
}

fn shape_str(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

/// One `<param>.tensor` per parameter plus a `key = value` manifest.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    writeln!(manifest, "model = {}", ckpt.model.name()).expect("string write");
    writeln!(manifest, "step = {}", ckpt.step).expect("string write");
    writeln!(manifest, "param_count = {}", ckpt.param_count()).expect("string write");
    for (name, t) in &ckpt.params {
        write_tensor_file(dir.join(format!("{name}.tensor")), t)?;
        writeln!(manifest, "{name} = {}", shape_str(t.shape())).expect("string write");
    }
    fs::write(dir.join(CHECKPOINT_MANIFEST), manifest)?;
    Ok(())
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.lines() {
        let trimmed = line.trim();
        if !trimmed.is_empty() && !trimmed.starts_with('#') {
            let (k, v) = trimmed.split_once('=').ok_or_else(|| {
                Error::format(offset, format!("expected `key = value`, got `{trimmed}`"))
            })?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        offset += line.len() + 1;
    }
    Ok(out)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?;
    let entries = parse_key_values(&text)?;
    let map: BTreeMap<&str, &str> = entries
        .iter()
        .map(|(k, v)| (k.as_str(), v.as_str()))
        .collect();
    let missing = |k: &str| Error::format(0, format!("checkpoint manifest lacks `{k}`"));
    let model: ModelKind = map.get("model").ok_or_else(|| missing("model"))?.parse()?;
    let step = map
        .get("step")
        .ok_or_else(|| missing("step"))?
        .parse()
        .map_err(|_| Error::format(0, "checkpoint step is not an integer"))?;
    let mut params = Vec::new();
    for (name, shape) in entries.iter().filter(|(k, _)| k.contains('.')) {
        let t = read_tensor_file(dir.join(format!("{name}.tensor")))?;
        if shape_str(t.shape()) != *shape {
            return Err(Error::format(
                0,
                format!(
                    "{name}: manifest says {shape}, file holds {}",
                    shape_str(t.shape())
                ),
            ));
        }
        params.push((name.clone(), t));
    }
    Ok(Checkpoint {
        model,
        step,
        params,
    })
}
