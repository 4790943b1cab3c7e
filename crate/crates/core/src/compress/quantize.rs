use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sym_eigen, Tensor};

pub const MAX_BITS: usize = 16;

/// `w ≈ Σ_i α_i b_i` with `b_i ∈ {−1, +1}ⁿ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedForm {
    pub shape: Vec<usize>,
    pub alphas: Vec<f64>,
    /// `bits × n`, each entry ±1.
    pub binaries: Vec<Vec<i8>>,
    /// Objective after greedy init and after every alternating iteration.
    pub objective_history: Vec<f64>,
}

impl QuantizedForm {
    pub fn bits(&self) -> usize {
        self.alphas.len()
    }

    pub fn reconstruct(&self) -> Tensor {
        let n = self.binaries.first().map_or(0, Vec::len);
        let mut out = vec![0.0; n];
        for (a, b) in self.alphas.iter().zip(&self.binaries) {
            for (o, &s) in out.iter_mut().zip(b) {
                *o += a * f64::from(s);
            }
        }
        Tensor::new(self.shape.clone(), out).expect("quantized shape")
    }

    pub fn objective(&self) -> f64 {
        *self
            .objective_history
            .last()
            .expect("history is never empty")
    }
}

fn objective(w: &[f64], alphas: &[f64], b: &[Vec<i8>]) -> f64 {
    let mut total = 0.0;
    for (j, &wj) in w.iter().enumerate() {
        let r = wj
            - alphas
                .iter()
                .zip(b)
                .map(|(a, bi)| a * f64::from(bi[j]))
                .sum::<f64>();
        total += r * r;
    }
    total
}

fn greedy(w: &[f64], q: usize) -> (Vec<f64>, Vec<Vec<i8>>) {
    let n = w.len();
    let mut r = w.to_vec();
    let mut alphas = Vec::with_capacity(q);
    let mut bins = Vec::with_capacity(q);
    for _ in 0..q {
        let b: Vec<i8> = r.iter().map(|&v| if v < 0.0 { -1 } else { 1 }).collect();
        let a = r.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
        for (rv, &s) in r.iter_mut().zip(&b) {
            *rv -= a * f64::from(s);
        }
        alphas.push(a);
        bins.push(b);
    }
    (alphas, bins)
}

/// Least-squares α for fixed codes: `(BᵀB) α = Bᵀw`, solved with a
/// pseudo-inverse so duplicate or empty codes stay well defined.
fn solve_alphas(w: &[f64], b: &[Vec<i8>]) -> Result<Vec<f64>> {
    let q = b.len();
    let n = w.len();
    if q == 1 {
        // Same summation order as the greedy step, so q = 1 is bit-identical.
        let s: f64 = w.iter().zip(&b[0]).map(|(&x, &s)| x * f64::from(s)).sum();
        return Ok(vec![s / n as f64]);
    }
    let mut gram = Tensor::zeros(&[q, q]);
    let mut rhs = vec![0.0; q];
    for i in 0..q {
        rhs[i] = w.iter().zip(&b[i]).map(|(&x, &s)| x * f64::from(s)).sum();
        for k in i..q {
            let dot: i64 = b[i]
                .iter()
                .zip(&b[k])
                .map(|(&x, &y)| i64::from(x * y))
                .sum();
            gram.set2(i, k, dot as f64);
            gram.set2(k, i, dot as f64);
        }
    }
    let eig = sym_eigen(&gram)?;
    let cutoff = eig.values[0].abs() * 1e-12 * q as f64;
    let mut alphas = vec![0.0; q];
    for (idx, &lambda) in eig.values.iter().enumerate() {
        if lambda <= cutoff {
            continue;
        }
        let proj: f64 = (0..q)
            .map(|i| eig.vectors.get2(i, idx) * rhs[i])
            .sum::<f64>()
            / lambda;
        for (i, a) in alphas.iter_mut().enumerate() {
            *a += proj * eig.vectors.get2(i, idx);
        }
    }
    Ok(alphas)
}

/// Nearest codeword per element given α. Codeword `c` has bit `i` equal to
/// −1 when bit `i` of `c` is set; ties pick the smaller `c`.
fn assign_codes(w: &[f64], alphas: &[f64], b: &mut [Vec<i8>]) {
    let q = alphas.len();
    let mut table: Vec<(f64, usize)> = (0..1usize << q)
        .map(|c| {
            let v = (0..q)
                .map(|i| {
                    if c >> i & 1 == 1 {
                        -alphas[i]
                    } else {
                        alphas[i]
                    }
                })
                .sum();
            (v, c)
        })
        .collect();
    table.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    for (j, &x) in w.iter().enumerate() {
        let pos = table.partition_point(|e| e.0 < x);
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        // The nearest value is adjacent to the insertion point; scan equal
        // values on both sides to honour the tie rule.
        let lo = pos.saturating_sub(1);
        let hi = (pos + 1).min(table.len());
        for &(v, c) in &table[lo..hi] {
            let d = (x - v).abs();
            if d < best_d || (d == best_d && c < best) {
                best_d = d;
                best = c;
            }
        }
        for &(v, c) in table[..lo].iter().rev() {
            if (x - v).abs() > best_d {
                break;
            }
            best = best.min(c);
        }
        for &(v, c) in &table[hi..] {
            if (x - v).abs() > best_d {
                break;
            }
            best = best.min(c);
        }
        for (i, bi) in b.iter_mut().enumerate() {
            bi[j] = if best >> i & 1 == 1 { -1 } else { 1 };
        }
    }
}

/// Greedy residual-sign initialisation followed by alternating
/// least-squares α / nearest-codeword b updates. Stops after `max_iters`
/// or when an iteration improves the objective by less than `tol` times
/// its previous value.
pub fn quantize_binary(w: &Tensor, q: usize, max_iters: usize, tol: f64) -> Result<QuantizedForm> {
    if q == 0 || q > MAX_BITS {
        return Err(Error::param(format!(
            "bits must be in 1..={MAX_BITS}, got {q}"
        )));
    }
    if !(tol >= 0.0) {
        return Err(Error::param(format!("tolerance must be >= 0, got {tol}")));
    }
    let x = w.data();
    let (mut alphas, mut bins) = greedy(x, q);
    let mut history = vec![objective(x, &alphas, &bins)];
    for _ in 0..max_iters {
        let prev = *history.last().expect("non-empty");
        let cand = solve_alphas(x, &bins)?;
        if objective(x, &cand, &bins) <= prev {
            alphas = cand;
        }
        let mut nb = bins.clone();
        assign_codes(x, &alphas, &mut nb);
        if objective(x, &alphas, &nb) <= objective(x, &alphas, &bins) {
            bins = nb;
        }
        let obj = objective(x, &alphas, &bins);
        history.push(obj);
        if prev - obj <= tol * prev {
            break;
        }
    }
    Ok(QuantizedForm {
        shape: w.shape().to_vec(),
        alphas,
        binaries: bins,
        objective_history: history,
    })
}

/// Objective of the greedy initialisation alone.
pub fn greedy_objective(w: &Tensor, q: usize) -> f64 {
    let (a, b) = greedy(w.data(), q);
    objective(w.data(), &a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{random_normal, RngStream};

    #[test]
    fn one_bit_closed_form() {
        let w = Tensor::from_vec(vec![1.0, -2.0, 3.0]);
        let f = quantize_binary(&w, 1, 10, 0.0).unwrap();
        assert_eq!(f.alphas, vec![2.0]);
        assert_eq!(f.binaries, vec![vec![1, -1, 1]]);
        assert_eq!(f.reconstruct().data(), &[2.0, -2.0, 2.0]);
    }

    fn brute_force_one_bit(w: &[f64]) -> f64 {
        let n = w.len();
        let mut best = f64::INFINITY;
        for mask in 0..1u32 << n {
            let b: Vec<f64> = (0..n)
                .map(|j| if mask >> j & 1 == 1 { -1.0 } else { 1.0 })
                .collect();
            let a = w.iter().zip(&b).map(|(x, s)| x * s).sum::<f64>() / n as f64;
            let e: f64 = w.iter().zip(&b).map(|(x, s)| (x - a * s).powi(2)).sum();
            best = best.min(e);
        }
        best
    }

    #[test]
    fn one_bit_matches_sign_vector_brute_force() {
        let mut rng = RngStream::new(21);
        for _ in 0..20 {
            let w = random_normal(&mut rng, &[8], 0.0, 1.0).unwrap();
            let f = quantize_binary(&w, 1, 10, 0.0).unwrap();
            let bf = brute_force_one_bit(w.data());
            assert!((f.objective() - bf).abs() <= 1e-12 * bf.max(1.0));
        }
    }

    /// Exhaustive over all code assignments for n elements, q = 2, with the
    /// least-squares α solved by Cramer's rule.
    fn brute_force_two_bit(w: &[f64]) -> f64 {
        let n = w.len();
        let mut best = f64::INFINITY;
        for mask in 0..1u32 << (2 * n) {
            let b1: Vec<f64> = (0..n)
                .map(|j| if mask >> j & 1 == 1 { -1.0 } else { 1.0 })
                .collect();
            let b2: Vec<f64> = (0..n)
                .map(|j| if mask >> (n + j) & 1 == 1 { -1.0 } else { 1.0 })
                .collect();
            let g11 = n as f64;
            let g12: f64 = b1.iter().zip(&b2).map(|(x, y)| x * y).sum();
            let r1: f64 = w.iter().zip(&b1).map(|(x, s)| x * s).sum();
            let r2: f64 = w.iter().zip(&b2).map(|(x, s)| x * s).sum();
            let det = g11 * g11 - g12 * g12;
            let (a1, a2) = if det.abs() < 1e-12 {
                (r1 / g11, 0.0)
            } else {
                ((g11 * r1 - g12 * r2) / det, (g11 * r2 - g12 * r1) / det)
            };
            let e: f64 = (0..n)
                .map(|j| (w[j] - a1 * b1[j] - a2 * b2[j]).powi(2))
                .sum();
            best = best.min(e);
        }
        best
    }

    #[test]
    fn two_bit_spec_vector() {
        let w = Tensor::from_vec(vec![0.5, 1.5, -2.0, 1.0]);
        let f = quantize_binary(&w, 2, 50, 0.0).unwrap();
        let opt = brute_force_two_bit(w.data());
        assert!(f.objective() <= greedy_objective(&w, 2) + 1e-15);
        assert!(f.objective() <= opt * 1.05 + 1e-12);
    }

    #[test]
    fn objective_is_monotone() {
        let mut rng = RngStream::new(4);
        for q in 1..=4 {
            let w = random_normal(&mut rng, &[500], 0.0, 1.0).unwrap();
            let f = quantize_binary(&w, q, 30, 0.0).unwrap();
            assert!(f.objective_history.windows(2).all(|p| p[1] <= p[0]));
            let direct = w.sub(&f.reconstruct()).unwrap().frobenius_norm().powi(2);
            assert!((direct - f.objective()).abs() < 1e-9 * direct.max(1.0));
        }
    }

    #[test]
    fn too_many_bits() {
        let w = Tensor::from_vec(vec![1.0]);
        assert!(matches!(
            quantize_binary(&w, 17, 1, 0.0),
            Err(Error::Parameter(_))
        ));
        assert!(quantize_binary(&w, 0, 1, 0.0).is_err());
    }

    #[test]
    fn codes_pick_nearest() {
        let w = vec![0.9, -0.2, 3.1, -3.0];
        let alphas = vec![2.0, 1.0];
        let mut b = vec![vec![0i8; 4]; 2];
        assign_codes(&w, &alphas, &mut b);
        // values: 3, 1, -1, -3
        let got: Vec<f64> = (0..4)
            .map(|j| 2.0 * f64::from(b[0][j]) + f64::from(b[1][j]))
            .collect();
        assert_eq!(got, vec![1.0, -1.0, 3.0, -3.0]);
    }
}
