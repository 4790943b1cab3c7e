//! Weight transforms `w' = h(w)` and their compression-ratio accounting.

mod lowrank;
mod prune;
mod quantize;
mod tucker;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use lowrank::{
    svd_factors, svd_truncate, tiled_svd, tiled_svd_factors, LowRankForm, TiledForm,
};
pub use prune::{prune_count, prune_indices, prune_magnitude, prune_mask};
pub use quantize::{greedy_objective, quantize_binary, QuantizedForm, MAX_BITS};
pub use tucker::{
    hosvd_error_sq, tucker2_decompose, tucker2_with, Tucker2Form, HOOI_MAX_SWEEPS, HOOI_REL_TOL,
};

use crate::error::{Error, Result};
use crate::nn::{lower_kernel, unlower_kernel, ModelGraph};
use crate::tensor::{write_tensor_file, RngStream, Tensor};

/// Entries with `|w|` below this are left out of ε statistics.
pub const EPSILON_FLOOR: f64 = 1e-8;

/// Bit width assumed for uncompressed weights in ratio accounting.
pub const BASELINE_BITS: f64 = 32.0;

fn default_max_iters() -> usize {
    20
}
fn default_tol() -> f64 {
    1e-6
}
fn yes() -> bool {
    true
}

/// One `h(w)` operator with its hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Operator {
    Prune {
        rate: f64,
    },
    Quantize {
        bits: usize,
        #[serde(default = "default_max_iters")]
        max_iters: usize,
        #[serde(default = "default_tol")]
        tol: f64,
    },
    Svd {
        rank: usize,
    },
    TiledSvd {
        tile_rows: usize,
        tile_cols: usize,
        rank: usize,
    },
    Tucker2 {
        rank_s: usize,
        rank_t: usize,
    },
    /// `w' = (1 − γθ)·w`, or `(1 − θ)·w` when `lr_scaled` is false.
    WeightDecay {
        theta: f64,
        #[serde(default = "yes")]
        lr_scaled: bool,
    },
    /// `w' = (1 − γθ)·w` with `θ ~ U(−a, a)` drawn per element.
    UniformNoise {
        a: f64,
        #[serde(default = "yes")]
        lr_scaled: bool,
    },
}

impl Operator {
    pub fn name(&self) -> &'static str {
        match self {
            Operator::Prune { .. } => "prune",
            Operator::Quantize { .. } => "quantize",
            Operator::Svd { .. } => "svd",
            Operator::TiledSvd { .. } => "tiled_svd",
            Operator::Tucker2 { .. } => "tucker2",
            Operator::WeightDecay { .. } => "weight_decay",
            Operator::UniformNoise { .. } => "uniform_noise",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::param(m));
        match *self {
            Operator::Prune { rate } if !(0.0..=1.0).contains(&rate) => {
                bad(format!("prune rate {rate} outside [0, 1]"))
            }
            Operator::Quantize { bits, tol, .. }
                if bits == 0 || bits > MAX_BITS || !(tol >= 0.0) =>
            {
                bad(format!(
                    "quantize needs 1 <= bits <= {MAX_BITS} and tol >= 0"
                ))
            }
            Operator::Svd { rank } if rank == 0 => bad("svd rank must be >= 1".into()),
            Operator::TiledSvd {
                tile_rows,
                tile_cols,
                rank,
            } if tile_rows == 0
                || tile_cols == 0
                || rank == 0
                || rank > tile_rows.min(tile_cols) =>
            {
                bad("tiled_svd needs positive tile dims and 1 <= rank <= min(tile dims)".into())
            }
            Operator::Tucker2 { rank_s, rank_t } if rank_s == 0 || rank_t == 0 => {
                bad("tucker2 ranks must be >= 1".into())
            }
            Operator::WeightDecay { theta, .. } if !(theta >= 0.0) || !theta.is_finite() => {
                bad(format!("weight decay theta {theta} must be >= 0"))
            }
            Operator::UniformNoise { a, .. } if !(a >= 0.0) || !a.is_finite() => {
                bad(format!("noise amplitude {a} must be >= 0"))
            }
            _ => Ok(()),
        }
    }

    /// Copy with the pruning rate replaced; other operators are unchanged.
    pub fn with_rate(&self, rate: f64) -> Operator {
        match self {
            Operator::Prune { .. } => Operator::Prune { rate },
            other => other.clone(),
        }
    }
}

/// An operator plus the weight layers it applies to (empty = every weight layer).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionSpec {
    #[serde(flatten)]
    pub op: Operator,
    #[serde(default)]
    pub layers: Vec<String>,
}

impl CompressionSpec {
    pub fn all(op: Operator) -> Self {
        CompressionSpec {
            op,
            layers: Vec::new(),
        }
    }

    pub fn on(op: Operator, layers: &[&str]) -> Self {
        CompressionSpec {
            op,
            layers: layers.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Resolves the selector against a model; unknown or parameter-free layers are errors.
    pub fn select(&self, model: &ModelGraph) -> Result<Vec<String>> {
        let weights = model.weight_layers();
        if self.layers.is_empty() {
            return Ok(weights);
        }
        for name in &self.layers {
            if !weights.contains(name) {
                return Err(Error::param(format!("no weight layer named `{name}`")));
            }
        }
        Ok(self.layers.clone())
    }
}

/// The matrix an SVD-type operator sees: dense weights as stored, conv
/// kernels lowered to `T × (S·d·d)`.
pub fn matrix_view(w: &Tensor) -> Result<Tensor> {
    match w.rank() {
        2 => Ok(w.clone()),
        4 => lower_kernel(w),
        _ => Err(Error::dim(format!(
            "no matrix view for shape {:?}",
            w.shape()
        ))),
    }
}

fn from_matrix_view(m: Tensor, like: &Tensor) -> Result<Tensor> {
    match like.rank() {
        4 => unlower_kernel(&m, like.shape()[0]),
        _ => Ok(m),
    }
}

/// Applies `op` to one weight tensor. `lr` is the current learning rate γ;
/// `rng` feeds the noise operator only.
pub fn transform(op: &Operator, w: &Tensor, lr: f64, rng: &mut RngStream) -> Result<Tensor> {
    op.validate()?;
    match *op {
        Operator::Prune { rate } => prune_magnitude(w, rate),
        Operator::Quantize {
            bits,
            max_iters,
            tol,
        } => Ok(quantize_binary(w, bits, max_iters, tol)?.reconstruct()),
        Operator::Svd { rank } => from_matrix_view(svd_truncate(&matrix_view(w)?, rank)?, w),
        Operator::TiledSvd {
            tile_rows,
            tile_cols,
            rank,
        } => from_matrix_view(tiled_svd(&matrix_view(w)?, tile_rows, tile_cols, rank)?, w),
        Operator::Tucker2 { rank_s, rank_t } => {
            Ok(tucker2_decompose(w, rank_s, rank_t)?.reconstruct())
        }
        Operator::WeightDecay { theta, lr_scaled } => {
            let g = if lr_scaled { lr } else { 1.0 };
            Ok(w.scale(1.0 - g * theta))
        }
        Operator::UniformNoise { a, lr_scaled } => {
            let g = if lr_scaled { lr } else { 1.0 };
            if a == 0.0 {
                return Ok(w.clone());
            }
            let mut out = w.clone();
            for v in out.data_mut() {
                *v *= 1.0 - g * rng.uniform(-a, a);
            }
            Ok(out)
        }
    }
}

/// Per-layer change statistics of one application.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    pub name: String,
    pub count: usize,
    /// Σ|w − w'|
    pub abs_sum: f64,
    /// Σ(w − w')²
    pub sq_sum: f64,
    /// Fraction of exactly-zero weights after the transform.
    pub sparsity: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ApplyStats {
    pub layers: Vec<LayerStats>,
}

impl ApplyStats {
    pub fn count(&self) -> usize {
        self.layers.iter().map(|l| l.count).sum()
    }

    /// Mean |w − w'| over every regularized weight.
    pub fn e_w(&self) -> f64 {
        self.layers.iter().map(|l| l.abs_sum).sum::<f64>() / self.count().max(1) as f64
    }

    /// ‖w − w'‖²/N over every regularized weight.
    pub fn delta_w(&self) -> f64 {
        self.layers.iter().map(|l| l.sq_sum).sum::<f64>() / self.count().max(1) as f64
    }
}

pub fn diff_stats(name: &str, w: &Tensor, w2: &Tensor) -> LayerStats {
    let (mut abs_sum, mut sq_sum) = (0.0, 0.0);
    for (a, b) in w.data().iter().zip(w2.data()) {
        let d = a - b;
        abs_sum += d.abs();
        sq_sum += d * d;
    }
    LayerStats {
        name: name.to_string(),
        count: w.len(),
        abs_sum,
        sq_sum,
        sparsity: w2.data().iter().filter(|&&v| v == 0.0).count() as f64 / w2.len() as f64,
    }
}

/// Replaces the weights of every selected layer by `h(w)`.
pub fn apply(
    spec: &CompressionSpec,
    model: &mut ModelGraph,
    lr: f64,
    rng: &mut RngStream,
) -> Result<ApplyStats> {
    let mut stats = ApplyStats::default();
    for name in spec.select(model)? {
        let layer = model.layer_mut(&name).expect("selected layer exists");
        let w = layer.weight().expect("weight layer");
        let w2 = transform(&spec.op, w, lr, rng).map_err(|e| match e {
            Error::Parameter(m) => Error::Parameter(format!("layer {name}: {m}")),
            Error::Dimension(m) => Error::Dimension(format!("layer {name}: {m}")),
            other => other,
        })?;
        stats.layers.push(diff_stats(&name, w, &w2));
        *layer.weight_mut().expect("weight layer") = w2;
    }
    Ok(stats)
}

/// Relative noise `ε = w'/w − 1` over entries with `|w| ≥ floor`.
pub fn epsilon(w: &Tensor, w2: &Tensor, floor: f64) -> Vec<f64> {
    w.data()
        .iter()
        .zip(w2.data())
        .filter(|(a, _)| a.abs() >= floor)
        .map(|(a, b)| b / a - 1.0)
        .collect()
}

fn require_rank(shape: &[usize], want: usize, op: &str) -> Result<()> {
    if shape.len() != want || shape.iter().any(|&d| d == 0) {
        return Err(Error::param(format!(
            "{op} ratio needs {want} positive dims, got {shape:?}"
        )));
    }
    Ok(())
}

/// Uncompressed over compressed parameter count (bit count for quantization)
/// for a weight of the given shape. SVD ratios below 1 are logged as a warning.
pub fn compression_ratio(op: &Operator, shape: &[usize]) -> Result<f64> {
    op.validate()?;
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::param(format!("degenerate layer shape {shape:?}")));
    }
    let matrix = |shape: &[usize]| -> Result<(usize, usize)> {
        match *shape {
            [m, n] => Ok((m, n)),
            [d, _, s, t] => Ok((t, s * d * d)),
            _ => Err(Error::param(format!("no matrix view for shape {shape:?}"))),
        }
    };
    let ratio = match *op {
        Operator::Prune { rate } => {
            if rate >= 1.0 {
                return Err(Error::param("prune rate 1 leaves no weights"));
            }
            1.0 / (1.0 - rate)
        }
        Operator::Quantize { bits, .. } => BASELINE_BITS / bits as f64,
        Operator::Svd { rank } => {
            let (m, n) = matrix(shape)?;
            if rank > m.min(n) {
                return Err(Error::param(format!("rank {rank} exceeds {m}×{n}")));
            }
            let r = (m * n) as f64 / (rank * (m + n)) as f64;
            if r < 1.0 {
                log::warn!("svd rank {rank} on {m}×{n} expands storage (ratio {r:.3})");
            }
            r
        }
        Operator::TiledSvd {
            tile_rows,
            tile_cols,
            rank,
        } => {
            let (m, n) = matrix(shape)?;
            if m % tile_rows != 0 || n % tile_cols != 0 {
                return Err(Error::param(format!(
                    "tile {tile_rows}×{tile_cols} does not divide {m}×{n}"
                )));
            }
            let tiles = (m / tile_rows) * (n / tile_cols);
            (m * n) as f64 / (tiles * rank * (tile_rows + tile_cols)) as f64
        }
        Operator::Tucker2 { rank_s, rank_t } => {
            require_rank(shape, 4, "tucker2")?;
            let (d2, s, t) = (shape[0] * shape[1], shape[2], shape[3]);
            if rank_s > s || rank_t > t {
                return Err(Error::param(format!("tucker2 ranks exceed S={s}, T={t}")));
            }
            (d2 * s * t) as f64 / (s * rank_s + d2 * rank_s * rank_t + t * rank_t) as f64
        }
        Operator::WeightDecay { .. } | Operator::UniformNoise { .. } => 1.0,
    };
    Ok(ratio)
}

/// Tucker-2 ratio `d²ST / (S·Rs + d²·Rs·Rt + T·Rt)`.
pub fn tucker2_ratio(d: usize, s: usize, t: usize, rs: usize, rt: usize) -> Result<f64> {
    compression_ratio(
        &Operator::Tucker2 {
            rank_s: rs,
            rank_t: rt,
        },
        &[d, d, s, t],
    )
}

/// Factored representation of one compressed layer.
#[derive(Clone, Debug, PartialEq)]
pub enum Compressed {
    Sparse(Tensor),
    Quantized(QuantizedForm),
    LowRank(LowRankForm),
    Tiled(TiledForm),
    Tucker2(Tucker2Form),
}

pub fn decompose(op: &Operator, w: &Tensor) -> Result<Compressed> {
    op.validate()?;
    match *op {
        Operator::Prune { rate } => Ok(Compressed::Sparse(prune_magnitude(w, rate)?)),
        Operator::Quantize {
            bits,
            max_iters,
            tol,
        } => Ok(Compressed::Quantized(quantize_binary(
            w, bits, max_iters, tol,
        )?)),
        Operator::Svd { rank } => Ok(Compressed::LowRank(svd_factors(&matrix_view(w)?, rank)?)),
        Operator::TiledSvd {
            tile_rows,
            tile_cols,
            rank,
        } => Ok(Compressed::Tiled(tiled_svd_factors(
            &matrix_view(w)?,
            tile_rows,
            tile_cols,
            rank,
        )?)),
        Operator::Tucker2 { rank_s, rank_t } => {
            Ok(Compressed::Tucker2(tucker2_decompose(w, rank_s, rank_t)?))
        }
        Operator::WeightDecay { .. } | Operator::UniformNoise { .. } => Err(Error::Unsupported(
            format!("{} has no compressed form", op.name()),
        )),
    }
}

/// Writes the factors of `c` as tensor containers under `dir` and returns a
/// JSON description (file names, ranks, bits, α values).
pub fn export_compressed(dir: &Path, layer: &str, c: &Compressed) -> Result<serde_json::Value> {
    fs::create_dir_all(dir)?;
    let put = |suffix: &str, t: &Tensor| -> Result<String> {
        let file = format!("{layer}.{suffix}.tensor");
        write_tensor_file(dir.join(&file), t)?;
        Ok(file)
    };
    let json = match c {
        Compressed::Sparse(w) => serde_json::json!({
            "layer": layer, "form": "sparse",
            "nonzeros": w.data().iter().filter(|&&v| v != 0.0).count(),
            "weight": put("weight", w)?,
        }),
        Compressed::Quantized(q) => {
            let n = q.binaries.first().map_or(0, Vec::len);
            let codes: Vec<f64> = q.binaries.iter().flatten().map(|&b| f64::from(b)).collect();
            serde_json::json!({
                "layer": layer, "form": "binary_code", "bits": q.bits(), "shape": q.shape,
                "alphas": q.alphas,
                "objective": q.objective(),
                "codes": put("codes", &Tensor::new(vec![q.bits(), n], codes)?)?,
            })
        }
        Compressed::LowRank(f) => serde_json::json!({
            "layer": layer, "form": "low_rank", "rank": f.left.shape()[1],
            "left": put("left", &f.left)?, "right": put("right", &f.right)?,
        }),
        Compressed::Tiled(f) => {
            let mut tiles = Vec::new();
            for (i, t) in f.tiles.iter().enumerate() {
                tiles.push(serde_json::json!({
                    "left": put(&format!("tile{i}.left"), &t.left)?,
                    "right": put(&format!("tile{i}.right"), &t.right)?,
                }));
            }
            serde_json::json!({
                "layer": layer, "form": "tiled_low_rank",
                "rows": f.rows, "cols": f.cols, "tile_rows": f.tile_rows, "tile_cols": f.tile_cols,
                "rank": f.tiles[0].left.shape()[1], "params": f.param_count(), "tiles": tiles,
            })
        }
        Compressed::Tucker2(f) => {
            let (rs, rt) = f.ranks();
            serde_json::json!({
                "layer": layer, "form": "tucker2", "rank_s": rs, "rank_t": rt,
                "error_sq": f.error_sq(),
                "core": put("core", &f.core)?, "ps": put("ps", &f.ps)?, "pt": put("pt", &f.pt)?,
            })
        }
    };
    Ok(json)
}
