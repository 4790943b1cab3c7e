#![allow(dead_code)]

use std::path::PathBuf;

use occreg::data::{load_mnist, mnist_paths, Dataset};
use occreg::experiment::ExperimentConfig;

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("data/mnist"))
}

/// Train and test splits, or `None` when the IDX files are absent.
pub fn mnist() -> Option<(Dataset, Dataset)> {
    let dir = mnist_dir();
    let (ti, tl) = mnist_paths(&dir, true);
    let (vi, vl) = mnist_paths(&dir, false);
    if !(ti.is_file() && tl.is_file() && vi.is_file() && vl.is_file()) {
        return None;
    }
    Some((load_mnist(ti, tl).unwrap(), load_mnist(vi, vl).unwrap()))
}

pub fn config(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&workspace_root().join("configs").join(name)).unwrap()
}
