use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of entries zeroed by rate `p` on `n` weights: `floor(p·n)`, with a
/// 1e-9 slack so rates like 0.29·100 are not lost to rounding.
pub fn prune_count(p: f64, n: usize) -> usize {
    ((p * n as f64 + 1e-9).floor() as usize).min(n)
}

fn check_rate(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::param(format!("prune rate {p} outside [0, 1]")));
    }
    Ok(())
}

/// Indices of the `k` smallest-magnitude entries; ties go to the lower index.
pub fn prune_indices(w: &[f64], k: usize) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..w.len()).collect();
    if k < w.len() {
        let key = |&i: &usize, &j: &usize| w[i].abs().total_cmp(&w[j].abs()).then(i.cmp(&j));
        idx.select_nth_unstable_by(k - 1, key);
        idx.truncate(k);
    }
    idx
}

/// Zeroes the `floor(p·n)` smallest-|w| entries.
pub fn prune_magnitude(w: &Tensor, p: f64) -> Result<Tensor> {
    check_rate(p)?;
    let mut out = w.clone();
    let k = prune_count(p, w.len());
    let data = out.data_mut();
    for i in prune_indices(w.data(), k) {
        data[i] = 0.0;
    }
    Ok(out)
}

/// 0/1 keep-mask matching `prune_magnitude`.
pub fn prune_mask(w: &Tensor, p: f64) -> Result<Vec<bool>> {
    check_rate(p)?;
    let mut keep = vec![true; w.len()];
    for i in prune_indices(w.data(), prune_count(p, w.len())) {
        keep[i] = false;
    }
    Ok(keep)
}
