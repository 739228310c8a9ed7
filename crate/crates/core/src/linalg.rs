//! Dense Cholesky factorization and the few products built on it.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("matrix is not numerically positive definite: pivot {pivot} = {value:e}")]
pub struct NotPositiveDefinite {
    pub pivot: usize,
    pub value: f64,
}

/// Lower-triangular factor `L` with `A = L·Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Array2<f64>,
}

/// Pivots below `PIVOT_RTOL · max(diag A)` are treated as a breakdown.
const PIVOT_RTOL: f64 = 1e-14;

impl Cholesky {
    pub fn factor(a: ArrayView2<'_, f64>) -> Result<Self, NotPositiveDefinite> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "Cholesky needs a square matrix");
        let scale = a.diag().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let mut l = Array2::<f64>::zeros((n, n));
        let ls = l.as_slice_mut().expect("fresh array is contiguous");
        for j in 0..n {
            let (head, tail) = ls.split_at_mut((j + 1) * n);
            let row_j = &mut head[j * n..];
            let diag = a[[j, j]] - dot(&row_j[..j], &row_j[..j]);
            if !(diag > PIVOT_RTOL * scale) || !diag.is_finite() {
                return Err(NotPositiveDefinite {
                    pivot: j,
                    value: diag,
                });
            }
            let ljj = diag.sqrt();
            row_j[j] = ljj;
            for (r, row_i) in tail.chunks_exact_mut(n).enumerate() {
                let i = j + 1 + r;
                row_i[j] = (a[[i, j]] - dot(&row_i[..j], &row_j[..j])) / ljj;
            }
        }
        Ok(Self { l })
    }

    pub fn l(&self) -> ArrayView2<'_, f64> {
        self.l.view()
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// `ln det A = 2 Σ ln L_kk`
    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diag().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// `L⁻¹`, lower triangular.
    pub fn l_inverse(&self) -> Array2<f64> {
        let n = self.dim();
        let l = self.l.as_slice().expect("factor is contiguous");
        // row j of `ut` is column j of L⁻¹
        let mut ut = vec![0.0; n * n];
        for (j, u) in ut.chunks_exact_mut(n).enumerate() {
            u[j] = 1.0 / l[j * n + j];
            for i in (j + 1)..n {
                let row_i = &l[i * n..];
                u[i] = -dot(&row_i[j..i], &u[j..i]) / row_i[i];
            }
        }
        Array2::from_shape_vec((n, n), ut)
            .expect("square")
            .reversed_axes()
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: ArrayView1<'_, f64>) -> Array1<f64> {
        let n = self.dim();
        let l = &self.l;
        let mut y = b.to_owned();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= l[[i, k]] * y[k];
            }
            y[i] = s / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[[k, i]] * y[k];
            }
            y[i] = s / l[[i, i]];
        }
        y
    }

    /// `A⁻¹ = L⁻ᵀ L⁻¹` together with `L⁻¹`.
    pub fn inverse(&self) -> (Array2<f64>, Array2<f64>) {
        let linv = self.l_inverse();
        let inv = linv.t().dot(&linv);
        (symmetrize(inv), linv)
    }
}

/// Sequential dot product, summed in index order.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Average a nearly symmetric matrix with its transpose.
pub fn symmetrize(mut a: Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
    a
}

/// Row-wise squared norms.
pub fn row_sq_norms(a: ArrayView2<'_, f64>) -> Array1<f64> {
    a.map_axis(Axis(1), |r| r.dot(&r))
}
