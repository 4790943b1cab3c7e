use crate::error::{Error, Result};
use crate::tensor::{sym_eigen, SymEigen, Tensor};

/// Local model `L(w) ≈ L(w0) + ½(w − w0)ᵀH(w − w0)` trained by plain
/// gradient descent with rate `lr`.
#[derive(Clone, Debug)]
pub struct QuadraticModel {
    pub h: Tensor,
    pub w0: Vec<f64>,
    pub lr: f64,
    eigen: Option<SymEigen>,
}

fn matvec(a: &Tensor, x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| {
            a.data()[i * n..(i + 1) * n]
                .iter()
                .zip(x)
                .map(|(p, q)| p * q)
                .sum()
        })
        .collect()
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl QuadraticModel {
    pub fn new(h: Tensor, w0: Vec<f64>, lr: f64) -> Result<Self> {
        let (n, m) = h.dims2()?;
        if n != m || w0.len() != n {
            return Err(Error::dim(format!(
                "H is {n}×{m} but w0 has {} entries",
                w0.len()
            )));
        }
        for i in 0..n {
            for j in i + 1..n {
                if (h.get2(i, j) - h.get2(j, i)).abs() > 1e-12 {
                    return Err(Error::param("H must be symmetric within 1e-12"));
                }
            }
        }
        if !(lr > 0.0) {
            return Err(Error::param("learning rate must be > 0"));
        }
        let eigen = sym_eigen(&h).ok();
        if let Some(e) = &eigen {
            if e.values.iter().any(|&v| v < -1e-12) {
                return Err(Error::param("H must be positive semidefinite"));
            }
        }
        Ok(QuadraticModel { h, w0, lr, eigen })
    }

    pub fn dim(&self) -> usize {
        self.w0.len()
    }

    /// `I − γH`
    pub fn iteration_matrix(&self) -> Tensor {
        let n = self.dim();
        let mut m = self.h.scale(-self.lr);
        for i in 0..n {
            m.set2(i, i, m.get2(i, i) + 1.0);
        }
        m
    }

    /// Spectral radius of `I − γH`.
    pub fn spectral_radius(&self) -> Result<f64> {
        let e = match &self.eigen {
            Some(e) => e.clone(),
            None => sym_eigen(&self.h)?,
        };
        Ok(e.values
            .iter()
            .map(|l| (1.0 - self.lr * l).abs())
            .fold(0.0, f64::max))
    }

    /// `w0 + (I − γH)^p (w_t − w0)` in closed form.
    pub fn trajectory(&self, w_t: &[f64], p: u64) -> Result<Vec<f64>> {
        self.check(w_t)?;
        let d: Vec<f64> = w_t.iter().zip(&self.w0).map(|(a, b)| a - b).collect();
        let moved = match &self.eigen {
            Some(e) => self.apply_power_eigen(e, &d, p),
            None => self.apply_power_squaring(&d, p)?,
        };
        Ok(moved.iter().zip(&self.w0).map(|(a, b)| a + b).collect())
    }

    fn apply_power_eigen(&self, e: &SymEigen, d: &[f64], p: u64) -> Vec<f64> {
        let n = d.len();
        let v = &e.vectors;
        let mut out = vec![0.0; n];
        for k in 0..n {
            let c: f64 = (0..n).map(|i| v.get2(i, k) * d[i]).sum();
            let mu = (1.0 - self.lr * e.values[k]).powf(p as f64);
            for i in 0..n {
                out[i] += v.get2(i, k) * c * mu;
            }
        }
        out
    }

    /// Same product by repeated squaring of `I − γH`.
    pub fn apply_power_squaring(&self, d: &[f64], mut p: u64) -> Result<Vec<f64>> {
        self.check(d)?;
        let mut base = self.iteration_matrix();
        let mut x = d.to_vec();
        while p > 0 {
            if p & 1 == 1 {
                x = matvec(&base, &x);
            }
            p >>= 1;
            if p > 0 {
                base = base.matmul(&base)?;
            }
        }
        Ok(x)
    }

    /// Step-by-step gradient descent `w ← w − γH(w − w0)`, `p` times.
    pub fn iterate(&self, w_t: &[f64], p: u64) -> Result<Vec<f64>> {
        self.check(w_t)?;
        let mut w = w_t.to_vec();
        for _ in 0..p {
            let d: Vec<f64> = w.iter().zip(&self.w0).map(|(a, b)| a - b).collect();
            let g = matvec(&self.h, &d);
            for (wi, gi) in w.iter_mut().zip(g) {
                *wi -= self.lr * gi;
            }
        }
        Ok(w)
    }

    /// Smallest `p` with `‖(I − γH)^p d‖ ≤ tol`.
    pub fn convergence_horizon(&self, displacement: &[f64], tol: f64) -> Result<u64> {
        self.check(displacement)?;
        if !(tol > 0.0) {
            return Err(Error::param("tolerance must be > 0"));
        }
        if norm(displacement) <= tol {
            return Ok(0);
        }
        let e = match &self.eigen {
            Some(e) => e.clone(),
            None => sym_eigen(&self.h)?,
        };
        let n = self.dim();
        let scale = norm(displacement);
        let modes: Vec<(f64, f64)> = (0..n)
            .map(|k| {
                let c: f64 = (0..n).map(|i| e.vectors.get2(i, k) * displacement[i]).sum();
                (c, (1.0 - self.lr * e.values[k]).abs())
            })
            .filter(|(c, _)| c.abs() > 1e-12 * scale)
            .collect();
        let rho = modes.iter().map(|m| m.1).fold(0.0, f64::max);
        if rho >= 1.0 {
            return Err(Error::Numeric {
                message: format!("spectral radius {rho} >= 1 on the displacement's support"),
                iterations: 0,
            });
        }
        let norm_at = |p: u64| -> f64 {
            modes
                .iter()
                .map(|(c, mu)| (c * mu.powf(p as f64)).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let mut hi = 1u64;
        while norm_at(hi) > tol {
            hi = hi.checked_mul(2).ok_or_else(|| Error::Numeric {
                message: "convergence horizon overflow".into(),
                iterations: 64,
            })?;
        }
        let mut lo = hi / 2;
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if norm_at(mid) <= tol {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(if norm_at(lo) <= tol { lo } else { hi })
    }

    fn check(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.dim() {
            return Err(Error::dim(format!(
                "vector of {} for a {}-dim model",
                w.len(),
                self.dim()
            )));
        }
        Ok(())
    }
}
