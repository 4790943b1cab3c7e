//! Config-driven runs: one TOML file fully determines a training run, its
//! regularization schedule and where artifacts go.

mod checkpoint;
mod sweep;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, parse_key_values, save_checkpoint, Checkpoint, CHECKPOINT_MANIFEST,
};
pub use sweep::{apply_axis, sweep, SweepRow};

use crate::compress::{compression_ratio, decompose, export_compressed, Operator};
use crate::data::{load_mnist, mnist_paths, synthetic_digits, Dataset};
use crate::error::{Error, Result};
use crate::nn::{train_steps, ModelKind, StepHook, TrainConfig};
use crate::schedule::{write_metrics_csv, write_metrics_jsonl, NrHook, NrSchedule};
use crate::tensor::RngStream;

/// Overrides `output.dir` when set.
pub const OUTPUT_ENV: &str = "OCCREG_OUT";
/// Default MNIST directory when `data.dir` is absent.
pub const MNIST_ENV: &str = "MNIST_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub model: ModelKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<NrSchedule>,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_name() -> String {
    "run".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    /// IDX files under `dir` (else `$MNIST_DIR`, else `data/mnist`).
    Mnist {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
    },
    /// Noisy class templates, for smoke tests without MNIST.
    Synthetic {
        n_train: usize,
        n_test: usize,
        #[serde(default)]
        seed: u64,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Mnist {
            dir: None,
            train_limit: None,
            test_limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
    /// Run directory name; defaults to `<name>-s<seed>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: default_out(),
            run_id: None,
        }
    }
}

fn at<T>(path: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config { .. } => e,
        other => Error::config(path, other.to_string()),
    })
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let path = e
                .span()
                .map_or_else(|| "<root>".to_string(), |s| format!("byte {}", s.start));
            Error::config(path, e.message().to_string())
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<root>", e.to_string()))
    }

    /// Range and consistency checks that need no file system access.
    pub fn validate_static(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config(
                "name",
                "must be non-empty and free of path separators",
            ));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::config("seed", "must fit in 63 bits"));
        }
        if self.train.n_steps == 0 {
            return Err(Error::config("train.n_steps", "must be >= 1"));
        }
        if self.train.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        at("train.optimizer", self.train.optimizer.validate())?;
        at("train.lr", self.train.lr.validate())?;
        if self.train.eval_chunk == 0 {
            return Err(Error::config("train.eval_chunk", "must be >= 1"));
        }
        if let DataConfig::Synthetic {
            n_train, n_test, ..
        } = self.data
        {
            if n_train == 0 || n_test == 0 {
                return Err(Error::config("data", "synthetic splits must be non-empty"));
            }
        }
        if let Some(s) = &self.schedule {
            if s.pnr == 0 {
                return Err(Error::config("schedule.pnr", "must be >= 1"));
            }
            if let Some(g) = &s.gradual {
                at("schedule.gradual", g.validate())?;
            }
            if let Some(e) = s.e_opt {
                if !(e > 0.0) {
                    return Err(Error::config("schedule.e_opt", "must be > 0"));
                }
            }
            if s.stop_at_event && self.train.n_steps % s.pnr != 0 {
                return Err(Error::config(
                    "schedule.stop_at_event",
                    format!(
                        "n_steps {} is not a multiple of pnr {}",
                        self.train.n_steps, s.pnr
                    ),
                ));
            }
            let model = self.model.build(&mut RngStream::new(0))?;
            for (i, rule) in s.rules.iter().enumerate() {
                let path = format!("schedule.rules[{i}]");
                at(&path, rule.op.validate())?;
                let layers = at(&format!("{path}.layers"), rule.select(&model))?;
                for name in layers {
                    let w = model
                        .layer(&name)
                        .and_then(|l| l.weight())
                        .expect("selected");
                    at(&path, compression_ratio(&rule.op, w.shape()))?;
                }
            }
        }
        Ok(())
    }

    /// Static checks plus existence of every referenced input file.
    pub fn validate(&self) -> Result<()> {
        self.validate_static()?;
        if let DataConfig::Mnist { .. } = self.data {
            let dir = self.mnist_dir();
            for train in [true, false] {
                let (img, lbl) = mnist_paths(&dir, train);
                for p in [img, lbl] {
                    if !p.is_file() {
                        return Err(Error::config(
                            "data.dir",
                            format!("missing {}", p.display()),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn mnist_dir(&self) -> PathBuf {
        match &self.data {
            DataConfig::Mnist { dir: Some(d), .. } => d.clone(),
            _ => std::env::var_os(MNIST_ENV)
                .map_or_else(|| PathBuf::from("data/mnist"), PathBuf::from),
        }
    }

    /// Copy with every defaulted location filled in, as recorded in run artifacts.
    pub fn resolved(&self) -> ExperimentConfig {
        let mut c = self.clone();
        if let DataConfig::Mnist { dir, .. } = &mut c.data {
            *dir = Some(self.mnist_dir());
        }
        c.output.dir = self.output_root();
        c.output.run_id = Some(self.run_id());
        c
    }

    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(OUTPUT_ENV).map_or_else(|| self.output.dir.clone(), PathBuf::from)
    }

    pub fn run_id(&self) -> String {
        self.output
            .run_id
            .clone()
            .unwrap_or_else(|| format!("{}-s{}", self.name, self.seed))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root().join(self.run_id())
    }
}

/// Loads (train, test) per the data section.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match cfg.data {
        DataConfig::Mnist {
            train_limit,
            test_limit,
            ..
        } => {
            let dir = cfg.mnist_dir();
            let (ti, tl) = mnist_paths(&dir, true);
            let (vi, vl) = mnist_paths(&dir, false);
            let mut train = load_mnist(ti, tl)?;
            let mut test = load_mnist(vi, vl)?;
            if let Some(n) = train_limit {
                train = train.truncate(n);
            }
            if let Some(n) = test_limit {
                test = test.truncate(n);
            }
            Ok((train, test))
        }
        DataConfig::Synthetic {
            n_train,
            n_test,
            seed,
        } => Ok((
            synthetic_digits(seed, 0, n_train, 28)?,
            synthetic_digits(seed, 1, n_test, 28)?,
        )),
    }
}

/// What a finished run reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub dir: PathBuf,
    pub seed: u64,
    pub steps: u64,
    pub events: u64,
    pub final_accuracy: Option<f64>,
    /// Uncompressed over compressed size across regularized layers.
    pub compression_ratio: f64,
    pub mean_e_w: Option<f64>,
    /// Fraction of exact zeros per regularized layer.
    pub sparsity: Vec<(String, f64)>,
}

/// Validates, loads data and runs.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    run_with_data(cfg, &train, &test, &cfg.run_dir())
}

/// Runs into `dir`, writing `config.toml`, `metrics.csv`, `metrics.jsonl`,
/// `checkpoint/`, `manifest.json` and, when the schedule stops on an event,
/// `compressed/`.
pub fn run_with_data(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    dir: &Path,
) -> Result<RunSummary> {
    cfg.validate_static()?;
    if cfg.train.batch_size > train.len() {
        return Err(Error::config(
            "train.batch_size",
            format!(
                "{} exceeds the {} training samples",
                cfg.train.batch_size,
                train.len()
            ),
        ));
    }
    let resolved = cfg.resolved();
    fs::create_dir_all(dir)?;
    for sub in ["checkpoint", "compressed"] {
        if dir.join(sub).exists() {
            fs::remove_dir_all(dir.join(sub))?;
        }
    }
    fs::write(dir.join("config.toml"), resolved.to_toml()?)?;

    let master = RngStream::new(cfg.seed);
    let mut model = cfg.model.build(&mut master.derive(0))?;
    let mut hook = match &cfg.schedule {
        Some(s) => Some(NrHook::new(s.clone(), master.derive(2))?),
        None => None,
    };
    let mut hooks: Vec<&mut dyn StepHook> = Vec::new();
    if let Some(h) = hook.as_mut() {
        hooks.push(h);
    }
    let outcome = train_steps(
        &mut model,
        train,
        Some(test),
        &cfg.train,
        &master.derive(1),
        &mut hooks,
    )?;

    write_metrics_csv(fs::File::create(dir.join("metrics.csv"))?, &outcome.records)?;
    write_metrics_jsonl(
        fs::File::create(dir.join("metrics.jsonl"))?,
        &outcome.records,
    )?;
    save_checkpoint(
        &dir.join("checkpoint"),
        &Checkpoint::capture(cfg.model, cfg.train.n_steps, &model),
    )?;

    let mut sparsity = Vec::new();
    let (mut dense, mut packed) = (0.0, 0.0);
    let mut deliverable = Vec::new();
    if let Some(s) = &cfg.schedule {
        for rule in &s.rules {
            let op = s.effective_op(rule, cfg.train.n_steps);
            for name in rule.select(&model)? {
                let w = model
                    .layer(&name)
                    .and_then(|l| l.weight())
                    .expect("selected layer");
                let n = w.len() as f64;
                let zeros = w.data().iter().filter(|&&v| v == 0.0).count() as f64;
                sparsity.push((name.clone(), zeros / n));
                let ratio = match op {
                    Operator::Prune { .. } => n / (n - zeros).max(1.0),
                    _ => compression_ratio(&op, w.shape())?,
                };
                dense += n;
                packed += n / ratio;
                if s.stop_at_event {
                    match decompose(&op, w) {
                        Ok(c) => {
                            deliverable.push(export_compressed(&dir.join("compressed"), &name, &c)?)
                        }
                        Err(Error::Unsupported(_)) => {}
                        Err(e) => return Err(e),
                    }
                }
            }
        }
    }
    if !deliverable.is_empty() {
        fs::write(
            dir.join("compressed").join("manifest.json"),
            serde_json::to_string_pretty(&deliverable)
                .map_err(|e| Error::format(0, e.to_string()))?,
        )?;
    }

    let e_w = hook
        .as_ref()
        .map(|h| h.e_w_series.clone())
        .unwrap_or_default();
    let summary = RunSummary {
        run_id: cfg.run_id(),
        dir: dir.to_path_buf(),
        seed: cfg.seed,
        steps: cfg.train.n_steps,
        events: e_w.len() as u64,
        final_accuracy: outcome.final_accuracy,
        compression_ratio: if packed > 0.0 { dense / packed } else { 1.0 },
        mean_e_w: (!e_w.is_empty()).then(|| e_w.iter().sum::<f64>() / e_w.len() as f64),
        sparsity,
    };
    let manifest = serde_json::json!({
        "run_id": summary.run_id,
        "seed": cfg.seed,
        "config": resolved,
        "summary": summary,
        "artifacts": ["config.toml", "metrics.csv", "metrics.jsonl", "checkpoint", "manifest.json"],
        "compressed": !deliverable.is_empty(),
    });
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(0, e.to_string()))?,
    )?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SMALL: &str = r#"
name = "tiny"
model = "lenet-300-100"
seed = 3

[data]
source = "synthetic"
n_train = 200
n_test = 100

[train]
n_steps = 20
batch_size = 10
optimizer = { kind = "adam" }
lr = { steps = [{ from_step = 0, lr = 0.001 }] }

[schedule]
pnr = 5
stop_at_event = true

[[schedule.rules]]
op = "prune"
rate = 0.5
layers = ["fc1"]
"#;

    #[test]
    fn toml_round_trip() {
        let c = ExperimentConfig::from_toml(SMALL).unwrap();
        let again = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, again);
        c.validate().unwrap();
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = ExperimentConfig::from_toml(SMALL).unwrap();
        c.train.n_steps = 21;
        match c.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "schedule.stop_at_event"),
            other => panic!("{other:?}"),
        }
        let mut c = ExperimentConfig::from_toml(SMALL).unwrap();
        c.schedule.as_mut().unwrap().rules[0].layers = vec!["fc9".into()];
        match c.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "schedule.rules[0].layers"),
            other => panic!("{other:?}"),
        }
        let bad = SMALL.replace("seed = 3", "sead = 3");
        assert!(matches!(
            ExperimentConfig::from_toml(&bad),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn missing_mnist_is_a_config_error() {
        let mut c = ExperimentConfig::from_toml(SMALL).unwrap();
        c.data = DataConfig::Mnist {
            dir: Some("/nonexistent/mnist".into()),
            train_limit: None,
            test_limit: None,
        };
        assert!(matches!(c.validate(), Err(Error::Config { path, .. }) if path == "data.dir"));
    }

    #[test]
    fn run_writes_layout() {
        let out = tempfile::tempdir().unwrap();
        let c = ExperimentConfig::from_toml(SMALL).unwrap();
        let (train, test) = load_data(&c).unwrap();
        let dir = out.path().join("r");
        let s = run_with_data(&c, &train, &test, &dir).unwrap();
        assert_eq!(s.events, 4);
        assert_eq!(s.sparsity, vec![("fc1".to_string(), 0.5)]);
        assert!((s.compression_ratio - 2.0).abs() < 1e-12);
        for f in [
            "config.toml",
            "metrics.csv",
            "metrics.jsonl",
            "manifest.json",
            "checkpoint/manifest.txt",
            "compressed/manifest.json",
        ] {
            assert!(dir.join(f).is_file(), "{f}");
        }
        let back = ExperimentConfig::load(&dir.join("config.toml")).unwrap();
        assert_eq!(back.seed, 3);
    }
}
