//! Dense row-major `f64` tensors and the kernels the rest of the crate
//! builds on: matrix multiply, SVD, symmetric eigendecomposition, norms and
//! seeded sampling.

mod io;
mod linalg;
mod rng;

pub use io::{read_tensor, read_tensor_file, write_tensor, write_tensor_file, TENSOR_MAGIC};
pub use linalg::{svd, sym_eigen, SvdResult, SymEigen, JACOBI_MAX_SWEEPS};
pub use rng::RngStream;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("zero extent in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// 1-D tensor from a vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Tensor {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut t = Tensor::zeros(&[n, n]);
        for (i, v) in values.iter().enumerate() {
            t.data[i * n + i] = *v;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::dim(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other)
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Row-block `[r0, r0+nr) x [c0, c0+nc)` of a matrix.
    pub fn submatrix(&self, r0: usize, c0: usize, nr: usize, nc: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if r0 + nr > r || c0 + nc > c {
            return Err(Error::dim("submatrix out of bounds"));
        }
        let mut data = Vec::with_capacity(nr * nc);
        for i in r0..r0 + nr {
            data.extend_from_slice(&self.data[i * c + c0..i * c + c0 + nc]);
        }
        Ok(Tensor {
            shape: vec![nr, nc],
            data,
        })
    }

    pub fn set_submatrix(&mut self, r0: usize, c0: usize, block: &Tensor) -> Result<()> {
        let (r, c) = self.dims2()?;
        let (nr, nc) = block.dims2()?;
        if r0 + nr > r || c0 + nc > c {
            return Err(Error::dim("submatrix out of bounds"));
        }
        for i in 0..nr {
            self.data[(r0 + i) * c + c0..(r0 + i) * c + c0 + nc]
                .copy_from_slice(&block.data[i * nc..(i + 1) * nc]);
        }
        Ok(())
    }
}

/// `C = A·B` for row-major matrices.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions differ: {m}x{k} · {k2}x{n}"
        )));
    }
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a.data(), false, b.data(), false, 0.0, &mut c);
    Ok(Tensor {
        shape: vec![m, n],
        data: c,
    })
}

/// `c = alpha·op(a)·op(b) + beta·c` on raw row-major slices, where `op`
/// optionally transposes. `a` is stored as `m×k` (or `k×m` when `ta`),
/// `b` as `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe exactly the m×k, k×n and m×n extents of
    // the slices checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn frobenius_norm(a: &Tensor) -> f64 {
    a.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Samples i.i.d. `N(mu, sigma²)` values.
pub fn random_normal(rng: &mut RngStream, shape: &[usize], mu: f64, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) || !sigma.is_finite() || !mu.is_finite() {
        return Err(Error::param(format!(
            "random_normal needs finite mu and sigma > 0 (got mu={mu}, sigma={sigma})"
        )));
    }
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| mu + sigma * rng.standard_normal()).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Samples i.i.d. `U(lo, hi)` values.
pub fn random_uniform(rng: &mut RngStream, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    if !(hi >= lo) {
        return Err(Error::param(format!("uniform range [{lo}, {hi}) is empty")));
    }
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(lo, hi)).collect();
    Tensor::new(shape.to_vec(), data)
}
