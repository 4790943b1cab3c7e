use crate::error::{Error, Result};
use crate::tensor::{gemm, svd, Tensor};

/// Rank-`R` factors `W ≈ left · rightᵀ` with `left = U_R·diag(s_R)` (m×R)
/// and `right = V_R` (n×R).
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankForm {
    pub left: Tensor,
    pub right: Tensor,
}

impl LowRankForm {
    pub fn reconstruct(&self) -> Tensor {
        let (m, r) = self.left.dims2().expect("2-D");
        let (n, _) = self.right.dims2().expect("2-D");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            r,
            n,
            1.0,
            self.left.data(),
            false,
            self.right.data(),
            true,
            0.0,
            &mut out,
        );
        Tensor::new(vec![m, n], out).expect("shape")
    }
}

fn check_rank(r: usize, m: usize, n: usize) -> Result<()> {
    if r == 0 || r > m.min(n) {
        return Err(Error::param(format!(
            "rank {r} outside 1..={} for {m}×{n}",
            m.min(n)
        )));
    }
    Ok(())
}

pub fn svd_factors(w: &Tensor, r: usize) -> Result<LowRankForm> {
    let (m, n) = w.dims2()?;
    check_rank(r, m, n)?;
    let s = svd(w)?;
    let k = s.k();
    let mut left = vec![0.0; m * r];
    let mut right = vec![0.0; n * r];
    for i in 0..m {
        for j in 0..r {
            left[i * r + j] = s.u.data()[i * k + j] * s.singular_values[j];
        }
    }
    for i in 0..n {
        right[i * r..(i + 1) * r].copy_from_slice(&s.v.data()[i * k..i * k + r]);
    }
    Ok(LowRankForm {
        left: Tensor::new(vec![m, r], left)?,
        right: Tensor::new(vec![n, r], right)?,
    })
}

/// Frobenius-optimal rank-`r` approximation.
pub fn svd_truncate(w: &Tensor, r: usize) -> Result<Tensor> {
    let (m, n) = w.dims2()?;
    check_rank(r, m, n)?;
    Ok(svd(w)?.reconstruct_rank(r))
}

/// Tiles in row-major tile order, each with its own rank-`r` factors.
#[derive(Clone, Debug, PartialEq)]
pub struct TiledForm {
    pub rows: usize,
    pub cols: usize,
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub tiles: Vec<LowRankForm>,
}

impl TiledForm {
    pub fn reconstruct(&self) -> Tensor {
        let mut out = Tensor::zeros(&[self.rows, self.cols]);
        let per_row = self.cols / self.tile_cols;
        for (t, f) in self.tiles.iter().enumerate() {
            let (bi, bj) = (t / per_row, t % per_row);
            out.set_submatrix(bi * self.tile_rows, bj * self.tile_cols, &f.reconstruct())
                .expect("tile fits");
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tiles
            .iter()
            .map(|f| f.left.len() + f.right.len())
            .sum()
    }
}

fn check_tiling(m: usize, n: usize, tr: usize, tc: usize, r: usize) -> Result<()> {
    if tr == 0 || tc == 0 || m % tr != 0 || n % tc != 0 {
        return Err(Error::param(format!(
            "tile {tr}×{tc} does not divide matrix {m}×{n}"
        )));
    }
    check_rank(r, tr, tc)
}

pub fn tiled_svd_factors(w: &Tensor, tr: usize, tc: usize, r: usize) -> Result<TiledForm> {
    let (m, n) = w.dims2()?;
    check_tiling(m, n, tr, tc, r)?;
    let mut tiles = Vec::with_capacity((m / tr) * (n / tc));
    for bi in 0..m / tr {
        for bj in 0..n / tc {
            let block = w.submatrix(bi * tr, bj * tc, tr, tc)?;
            tiles.push(svd_factors(&block, r)?);
        }
    }
    Ok(TiledForm {
        rows: m,
        cols: n,
        tile_rows: tr,
        tile_cols: tc,
        tiles,
    })
}

/// Replaces every `tr × tc` tile by its rank-`r` truncation.
pub fn tiled_svd(w: &Tensor, tr: usize, tc: usize, r: usize) -> Result<Tensor> {
    let (m, n) = w.dims2()?;
    check_tiling(m, n, tr, tc, r)?;
    let mut out = Tensor::zeros(&[m, n]);
    for bi in 0..m / tr {
        for bj in 0..n / tc {
            let block = w.submatrix(bi * tr, bj * tc, tr, tc)?;
            out.set_submatrix(bi * tr, bj * tc, &svd(&block)?.reconstruct_rank(r))?;
        }
    }
    Ok(out)
}
