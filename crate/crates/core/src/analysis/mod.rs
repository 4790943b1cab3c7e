//! Offline analytics: weight-noise distributions, weight histograms, the
//! local quadratic convergence model and the noise-loss expansion check.

mod histogram;
mod quadratic;
mod taylor;

pub use histogram::{BinSpec, Histogram};
pub use quadratic::QuadraticModel;
pub use taylor::{
    gap_ratio, synthetic_problem, taylor_noise_check, LossKind, RegressionNet, TaylorCheck,
    TaylorProblem, TraceMethod, DEFAULT_PROBES,
};

use crate::compress::{epsilon, transform, Operator, EPSILON_FLOOR};
use crate::error::{Error, Result};
use crate::nn::ModelGraph;
use crate::tensor::{svd, RngStream, Tensor};

/// Distribution of `ε = w'/w − 1` for one compression setting.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonDistribution {
    /// Over entries with `|w| ≥ δ`.
    pub hist: Histogram,
    /// `Σ w²ε / Σ w²`, i.e. `Σ w(w' − w) / Σ w²`. Finite even when the plain
    /// mean of ε is dominated by near-zero weights.
    pub weighted_mean: f64,
}

/// Histogram of `ε = w'/w − 1` over entries with `|w| ≥ δ`.
pub fn epsilon_distribution(
    w: &Tensor,
    op: &Operator,
    bins: BinSpec,
) -> Result<EpsilonDistribution> {
    match op {
        Operator::Quantize { .. }
        | Operator::Svd { .. }
        | Operator::TiledSvd { .. }
        | Operator::Prune { .. } => {}
        other => {
            return Err(Error::Unsupported(format!(
                "epsilon distribution is defined for quantize, svd and prune, not {}",
                other.name()
            )))
        }
    }
    let w2 = transform(op, w, 1.0, &mut RngStream::new(0))?;
    epsilon_histogram(w, &w2, bins)
}

fn epsilon_histogram(w: &Tensor, w2: &Tensor, bins: BinSpec) -> Result<EpsilonDistribution> {
    let eps = epsilon(w, w2, EPSILON_FLOOR);
    if eps.is_empty() {
        return Err(Error::param(format!(
            "every entry is below the ε floor {EPSILON_FLOOR}"
        )));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (&a, &b) in w.data().iter().zip(w2.data()) {
        num += a * (b - a);
        den += a * a;
    }
    Ok(EpsilonDistribution {
        hist: Histogram::build(&eps, bins)?,
        weighted_mean: num / den,
    })
}

/// ε histograms for several SVD ranks sharing one decomposition.
pub fn epsilon_svd_ranks(
    w: &Tensor,
    ranks: &[usize],
    bins: BinSpec,
) -> Result<Vec<EpsilonDistribution>> {
    let (m, n) = w.dims2()?;
    if let Some(&r) = ranks.iter().find(|&&r| r == 0 || r > m.min(n)) {
        return Err(Error::param(format!("rank {r} outside 1..={}", m.min(n))));
    }
    let s = svd(w)?;
    ranks
        .iter()
        .map(|&r| epsilon_histogram(w, &s.reconstruct_rank(r), bins))
        .collect()
}

/// Histogram over the weights of `layers` (all weight layers when empty).
pub fn weight_histogram(model: &ModelGraph, layers: &[String], bins: BinSpec) -> Result<Histogram> {
    Histogram::build(&weight_values(model, layers)?, bins)
}

pub fn weight_values(model: &ModelGraph, layers: &[String]) -> Result<Vec<f64>> {
    let names = if layers.is_empty() {
        model.weight_layers()
    } else {
        layers.to_vec()
    };
    let mut values = Vec::new();
    for name in &names {
        let w = model
            .layer(name)
            .and_then(|l| l.weight())
            .ok_or_else(|| Error::param(format!("no weight layer named `{name}`")))?;
        values.extend_from_slice(w.data());
    }
    Ok(values)
}

/// Among nonzero values, the fraction with `|w| < rel · max|w|`.
pub fn near_zero_fraction(values: &[f64], rel: f64) -> f64 {
    let max = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let nonzero: Vec<f64> = values.iter().copied().filter(|&v| v != 0.0).collect();
    if nonzero.is_empty() {
        return 0.0;
    }
    nonzero.iter().filter(|v| v.abs() < rel * max).count() as f64 / nonzero.len() as f64
}
