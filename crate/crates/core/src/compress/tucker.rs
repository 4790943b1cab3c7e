use crate::error::{Error, Result};
use crate::tensor::{gemm, sym_eigen, Tensor};

pub const HOOI_MAX_SWEEPS: usize = 5;
pub const HOOI_REL_TOL: f64 = 1e-6;

/// `K[ki,kj,s,t] ≈ Σ C[ki,kj,i,j]·Ps[s,i]·Pt[t,j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tucker2Form {
    /// `d × d × Rs × Rt`
    pub core: Tensor,
    /// `S × Rs`, orthonormal columns.
    pub ps: Tensor,
    /// `T × Rt`, orthonormal columns.
    pub pt: Tensor,
    /// Squared Frobenius error of the HOSVD start and after each HOOI sweep.
    pub error_history: Vec<f64>,
}

struct Dims {
    p: usize,
    s: usize,
    t: usize,
}

fn kernel_dims(k: &Tensor) -> Result<(usize, Dims)> {
    match *k.shape() {
        [d, d2, s, t] if d == d2 => Ok((d, Dims { p: d * d, s, t })),
        _ => Err(Error::dim(format!(
            "Tucker-2 needs a d×d×S×T kernel, got {:?}",
            k.shape()
        ))),
    }
}

/// Leading `r` eigenvectors of a symmetric Gram matrix, as an `n × r` matrix.
fn leading(gram: &Tensor, r: usize) -> Result<Tensor> {
    let n = gram.shape()[0];
    let e = sym_eigen(gram)?;
    let mut out = vec![0.0; n * r];
    for i in 0..n {
        out[i * r..(i + 1) * r].copy_from_slice(&e.vectors.data()[i * n..i * n + r]);
    }
    Tensor::new(vec![n, r], out)
}

/// Σ_p Y_p·Y_pᵀ with Y_p = M_p·Pt (or M_p).
fn gram_s(k: &[f64], dm: &Dims, pt: Option<&Tensor>) -> Tensor {
    let (s, t) = (dm.s, dm.t);
    let mut g = vec![0.0; s * s];
    for slice in k.chunks_exact(s * t) {
        match pt {
            Some(pt) => {
                let rt = pt.shape()[1];
                let mut y = vec![0.0; s * rt];
                gemm(s, t, rt, 1.0, slice, false, pt.data(), false, 0.0, &mut y);
                gemm(s, rt, s, 1.0, &y, false, &y, true, 1.0, &mut g);
            }
            None => gemm(s, t, s, 1.0, slice, false, slice, true, 1.0, &mut g),
        }
    }
    Tensor::new(vec![s, s], symmetrize(g, s)).expect("gram")
}

/// Σ_p Z_pᵀ·Z_p with Z_p = Psᵀ·M_p (or M_p).
fn gram_t(k: &[f64], dm: &Dims, ps: Option<&Tensor>) -> Tensor {
    let (s, t) = (dm.s, dm.t);
    let mut g = vec![0.0; t * t];
    for slice in k.chunks_exact(s * t) {
        match ps {
            Some(ps) => {
                let rs = ps.shape()[1];
                let mut z = vec![0.0; rs * t];
                gemm(rs, s, t, 1.0, ps.data(), true, slice, false, 0.0, &mut z);
                gemm(t, rs, t, 1.0, &z, true, &z, false, 1.0, &mut g);
            }
            None => gemm(t, s, t, 1.0, slice, true, slice, false, 1.0, &mut g),
        }
    }
    Tensor::new(vec![t, t], symmetrize(g, t)).expect("gram")
}

fn symmetrize(mut g: Vec<f64>, n: usize) -> Vec<f64> {
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (g[i * n + j] + g[j * n + i]);
            g[i * n + j] = v;
            g[j * n + i] = v;
        }
    }
    g
}

/// `C_p = Psᵀ·M_p·Pt` for every spatial position.
fn project(k: &[f64], dm: &Dims, ps: &Tensor, pt: &Tensor) -> Vec<f64> {
    let (s, t) = (dm.s, dm.t);
    let (rs, rt) = (ps.shape()[1], pt.shape()[1]);
    let mut core = vec![0.0; dm.p * rs * rt];
    let mut y = vec![0.0; s * rt];
    for (slice, c) in k.chunks_exact(s * t).zip(core.chunks_exact_mut(rs * rt)) {
        gemm(s, t, rt, 1.0, slice, false, pt.data(), false, 0.0, &mut y);
        gemm(rs, s, rt, 1.0, ps.data(), true, &y, false, 0.0, c);
    }
    core
}

impl Tucker2Form {
    pub fn ranks(&self) -> (usize, usize) {
        (self.ps.shape()[1], self.pt.shape()[1])
    }

    pub fn reconstruct(&self) -> Tensor {
        let d = self.core.shape()[0];
        let (s, rs) = (self.ps.shape()[0], self.ps.shape()[1]);
        let (t, rt) = (self.pt.shape()[0], self.pt.shape()[1]);
        let mut out = vec![0.0; d * d * s * t];
        let mut y = vec![0.0; s * rt];
        for (c, o) in self
            .core
            .data()
            .chunks_exact(rs * rt)
            .zip(out.chunks_exact_mut(s * t))
        {
            gemm(s, rs, rt, 1.0, self.ps.data(), false, c, false, 0.0, &mut y);
            gemm(s, rt, t, 1.0, &y, false, self.pt.data(), true, 0.0, o);
        }
        Tensor::new(vec![d, d, s, t], out).expect("kernel shape")
    }

    pub fn error_sq(&self) -> f64 {
        *self.error_history.last().expect("non-empty")
    }
}

/// HOSVD start followed by HOOI sweeps until `HOOI_MAX_SWEEPS` or a relative
/// improvement below `HOOI_REL_TOL`. Returns the best iterate seen.
pub fn tucker2_decompose(k: &Tensor, rs: usize, rt: usize) -> Result<Tucker2Form> {
    tucker2_with(k, rs, rt, HOOI_MAX_SWEEPS)
}

pub fn tucker2_with(k: &Tensor, rs: usize, rt: usize, max_sweeps: usize) -> Result<Tucker2Form> {
    let (d, dm) = kernel_dims(k)?;
    if rs == 0 || rs > dm.s || rt == 0 || rt > dm.t {
        return Err(Error::param(format!(
            "Tucker-2 ranks ({rs}, {rt}) outside 1..={} × 1..={}",
            dm.s, dm.t
        )));
    }
    if !k.is_finite() {
        return Err(Error::param("kernel has non-finite entries"));
    }
    let x = k.data();
    let norm_sq: f64 = x.iter().map(|v| v * v).sum();
    let err_of = |core: &[f64]| (norm_sq - core.iter().map(|v| v * v).sum::<f64>()).max(0.0);

    let mut ps = leading(&gram_s(x, &dm, None), rs)?;
    let mut pt = leading(&gram_t(x, &dm, None), rt)?;
    let mut core = project(x, &dm, &ps, &pt);
    let mut err = err_of(&core);
    let mut history = vec![err];
    let mut best = (ps.clone(), pt.clone(), core.clone(), err);

    for _ in 0..max_sweeps {
        ps = leading(&gram_s(x, &dm, Some(&pt)), rs)?;
        pt = leading(&gram_t(x, &dm, Some(&ps)), rt)?;
        core = project(x, &dm, &ps, &pt);
        let prev = err;
        err = err_of(&core);
        history.push(err);
        if err < best.3 {
            best = (ps.clone(), pt.clone(), core.clone(), err);
        }
        if prev - err <= HOOI_REL_TOL * prev {
            break;
        }
    }
    let (ps, pt, core, _) = best;
    let mut form = Tucker2Form {
        core: Tensor::new(vec![d, d, rs, rt], core)?,
        ps,
        pt,
        error_history: history,
    };
    // Report the best error computed directly rather than by subtraction.
    let direct = k.sub(&form.reconstruct())?.frobenius_norm().powi(2);
    let best_idx = form.error_history.iter().enumerate().fold(0, |b, (i, &e)| {
        if e < form.error_history[b] {
            i
        } else {
            b
        }
    });
    form.error_history.truncate(best_idx + 1);
    form.error_history.push(direct);
    Ok(form)
}

/// Squared error of projecting each mode independently (HOSVD only).
pub fn hosvd_error_sq(k: &Tensor, rs: usize, rt: usize) -> Result<f64> {
    let f = tucker2_with(k, rs, rt, 0)?;
    Ok(f.error_sq())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{random_normal, RngStream};

    fn orthonormal(p: &Tensor) -> f64 {
        let r = p.shape()[1];
        let g = p.transpose().unwrap().matmul(p).unwrap();
        g.sub(&Tensor::eye(r)).unwrap().max_abs()
    }

    #[test]
    fn full_ranks_exact() {
        let k = random_normal(&mut RngStream::new(1), &[3, 3, 5, 4], 0.0, 1.0).unwrap();
        let f = tucker2_decompose(&k, 5, 4).unwrap();
        assert!(f.reconstruct().sub(&k).unwrap().frobenius_norm() < 1e-8 * k.frobenius_norm());
        assert!(orthonormal(&f.ps) < 1e-8 && orthonormal(&f.pt) < 1e-8);
    }

    #[test]
    fn separable_kernel_recovered() {
        let mut rng = RngStream::new(2);
        let c0 = random_normal(&mut rng, &[3, 3], 0.0, 1.0).unwrap();
        let p = random_normal(&mut rng, &[6], 0.0, 1.0).unwrap();
        let q = random_normal(&mut rng, &[7], 0.0, 1.0).unwrap();
        let mut data = Vec::new();
        for &c in c0.data() {
            for &a in p.data() {
                for &b in q.data() {
                    data.push(c * a * b);
                }
            }
        }
        let k = Tensor::new(vec![3, 3, 6, 7], data).unwrap();
        let f = tucker2_decompose(&k, 1, 1).unwrap();
        assert!(f.reconstruct().sub(&k).unwrap().frobenius_norm() < 1e-8 * k.frobenius_norm());
        assert_eq!(f.core.shape(), &[3, 3, 1, 1]);
    }

    #[test]
    fn hooi_no_worse_than_hosvd() {
        let k = random_normal(&mut RngStream::new(3), &[3, 3, 8, 8], 0.0, 1.0).unwrap();
        let f = tucker2_decompose(&k, 4, 4).unwrap();
        let h = hosvd_error_sq(&k, 4, 4).unwrap();
        assert!(f.error_sq() <= h * (1.0 + 1e-12));
        let direct = k.sub(&f.reconstruct()).unwrap().frobenius_norm().powi(2);
        assert!((direct - f.error_sq()).abs() < 1e-9);
    }

    #[test]
    fn rank_out_of_range() {
        let k = Tensor::zeros(&[3, 3, 4, 4]);
        assert!(matches!(
            tucker2_decompose(&k, 5, 1),
            Err(Error::Parameter(_))
        ));
        assert!(tucker2_decompose(&k, 1, 0).is_err());
        assert!(matches!(
            tucker2_decompose(&Tensor::zeros(&[4, 4]), 1, 1),
            Err(Error::Dimension(_))
        ));
    }
}
