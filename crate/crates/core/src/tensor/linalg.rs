use super::Tensor;
use crate::error::{Error, Result};

/// Sweep cap for both Jacobi solvers. Well-conditioned inputs converge in
/// well under 20 sweeps.
pub const JACOBI_MAX_SWEEPS: usize = 60;

/// Thin SVD `a = u · diag(singular_values) · vᵀ` with `k = min(m, n)`.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: Tensor,
    pub singular_values: Vec<f64>,
    pub v: Tensor,
}

impl SvdResult {
    pub fn k(&self) -> usize {
        self.singular_values.len()
    }

    /// `u[:, :r] · diag(s[:r]) · v[:, :r]ᵀ`.
    pub fn reconstruct_rank(&self, r: usize) -> Tensor {
        let (m, k) = (self.u.shape()[0], self.k());
        let n = self.v.shape()[0];
        let r = r.min(k);
        // us = u[:, :r] * s, stored m×r
        let mut us = vec![0.0; m * r];
        for i in 0..m {
            for j in 0..r {
                us[i * r + j] = self.u.data()[i * k + j] * self.singular_values[j];
            }
        }
        let mut vr = vec![0.0; n * r];
        for i in 0..n {
            vr[i * r..(i + 1) * r].copy_from_slice(&self.v.data()[i * k..i * k + r]);
        }
        let mut out = vec![0.0; m * n];
        if r > 0 {
            super::gemm(m, r, n, 1.0, &us, false, &vr, true, 0.0, &mut out);
        }
        Tensor::new(vec![m, n], out).expect("reconstruct shape")
    }

    pub fn reconstruct(&self) -> Tensor {
        self.reconstruct_rank(self.k())
    }
}

/// Eigendecomposition of a symmetric matrix, eigenvalues descending.
/// `vectors` is `n×n` with eigenvectors in columns.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Tensor,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (xi, yi) in x.iter_mut().zip(y.iter_mut()) {
        let t = *xi;
        *xi = c * t - s * *yi;
        *yi = s * t + c * *yi;
    }
}

/// Two disjoint mutable rows of a row-major buffer.
fn row_pair(buf: &mut [f64], width: usize, i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(i < j);
    let (head, tail) = buf.split_at_mut(j * width);
    (&mut head[i * width..(i + 1) * width], &mut tail[..width])
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd(a: &Tensor) -> Result<SvdResult> {
    let (m, n) = a.dims2()?;
    if !a.is_finite() {
        return Err(Error::param("svd input contains non-finite values"));
    }
    if m < n {
        let t = svd_tall(&a.transpose()?)?;
        return Ok(SvdResult {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        });
    }
    svd_tall(a)
}

fn svd_tall(a: &Tensor) -> Result<SvdResult> {
    let (m, n) = a.dims2()?;
    // Columns of `a` stored contiguously: g[j] is column j.
    let mut g = a.transpose()?.into_data();
    let mut v = Tensor::eye(n).into_data(); // row j = column j of V
    let mut norms: Vec<f64> = (0..n)
        .map(|j| dot(&g[j * m..(j + 1) * m], &g[j * m..(j + 1) * m]))
        .collect();
    let tol = (m as f64).sqrt() * f64::EPSILON;

    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < JACOBI_MAX_SWEEPS {
        sweeps += 1;
        let mut rotated = false;
        for i in 0..n.saturating_sub(1) {
            for j in i + 1..n {
                let (alpha, beta) = (norms[i], norms[j]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let (gi, gj) = row_pair(&mut g, m, i, j);
                let gamma = dot(gi, gj);
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(gi, gj, c, s);
                norms[i] = alpha - t * gamma;
                norms[j] = beta + t * gamma;
                let (vi, vj) = row_pair(&mut v, n, i, j);
                rotate(vi, vj, c, s);
            }
        }
        for j in 0..n {
            let col = &g[j * m..(j + 1) * m];
            norms[j] = dot(col, col);
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric {
            message: format!("one-sided Jacobi SVD of {m}x{n} did not converge"),
            iterations: sweeps,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let sigma: Vec<f64> = norms.iter().map(|v| v.sqrt()).collect();
    order.sort_by(|&x, &y| sigma[y].total_cmp(&sigma[x]).then(x.cmp(&y)));

    let smax = sigma[order[0]];
    let floor = smax * (m as f64) * f64::EPSILON * 8.0;
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut svals = Vec::with_capacity(n);
    let mut vcols: Vec<&[f64]> = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (pos, &j) in order.iter().enumerate() {
        let s = sigma[j];
        svals.push(s);
        vcols.push(&v[j * n..(j + 1) * n]);
        if s > floor && s > 0.0 {
            ucols.push(g[j * m..(j + 1) * m].iter().map(|x| x / s).collect());
        } else {
            ucols.push(vec![0.0; m]);
            deficient.push(pos);
        }
    }
    complete_basis(&mut ucols, &deficient, m);

    let mut u = vec![0.0; m * n];
    for (c, col) in ucols.iter().enumerate() {
        for r in 0..m {
            u[r * n + c] = col[r];
        }
    }
    let mut vout = vec![0.0; n * n];
    for (c, col) in vcols.iter().enumerate() {
        for r in 0..n {
            vout[r * n + c] = col[r];
        }
    }
    Ok(SvdResult {
        u: Tensor::new(vec![m, n], u)?,
        singular_values: svals,
        v: Tensor::new(vec![n, n], vout)?,
    })
}

/// Fills `cols[missing]` with unit vectors orthogonal to every other column
/// (modified Gram–Schmidt, two passes, over the standard basis).
fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize], m: usize) {
    let mut next_basis = 0;
    for &slot in missing {
        loop {
            assert!(next_basis < m, "cannot complete orthonormal basis");
            let mut cand = vec![0.0; m];
            cand[next_basis] = 1.0;
            next_basis += 1;
            for _ in 0..2 {
                for (k, other) in cols.iter().enumerate() {
                    if k == slot || (missing.contains(&k) && other.iter().all(|&x| x == 0.0)) {
                        continue;
                    }
                    let p = dot(&cand, other);
                    for (c, o) in cand.iter_mut().zip(other) {
                        *c -= p * o;
                    }
                }
            }
            let nrm = dot(&cand, &cand).sqrt();
            if nrm > 0.5 {
                cols[slot] = cand.into_iter().map(|x| x / nrm).collect();
                break;
            }
        }
    }
}

/// Cyclic two-sided Jacobi eigendecomposition of a symmetric matrix.
pub fn sym_eigen(a: &Tensor) -> Result<SymEigen> {
    let (n, n2) = a.dims2()?;
    if n != n2 {
        return Err(Error::dim(format!(
            "sym_eigen needs a square matrix, got {n}x{n2}"
        )));
    }
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in 0..i {
            if (a.get2(i, j) - a.get2(j, i)).abs() > 1e-12 * scale {
                return Err(Error::param("sym_eigen input is not symmetric"));
            }
        }
    }
    let mut m = a.data().to_vec();
    let mut vecs = Tensor::eye(n).into_data();
    let total = a.frobenius_norm().max(f64::MIN_POSITIVE);

    let mut sweeps = 0;
    loop {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= n as f64 * f64::EPSILON * total {
            break;
        }
        if sweeps >= JACOBI_MAX_SWEEPS {
            return Err(Error::Numeric {
                message: format!("Jacobi eigensolver on {n}x{n} did not converge"),
                iterations: sweeps,
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                // Below rounding level relative to the diagonal: treat as converged.
                if apq.abs() <= f64::EPSILON * (app * aqq).abs().sqrt() * 0.5 {
                    m[p * n + q] = 0.0;
                    m[q * n + p] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.is_infinite() {
                    0.0
                } else {
                    let sgn = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sgn / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = vecs[k * n + p];
                    let vkq = vecs[k * n + q];
                    vecs[k * n + p] = c * vkp - s * vkq;
                    vecs[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[y * n + y].total_cmp(&m[x * n + x]).then(x.cmp(&y)));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut out = vec![0.0; n * n];
    for (c, &src) in order.iter().enumerate() {
        for r in 0..n {
            out[r * n + c] = vecs[r * n + src];
        }
    }
    Ok(SymEigen {
        values,
        vectors: Tensor::new(vec![n, n], out)?,
    })
}
