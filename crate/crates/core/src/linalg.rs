//! Dense linear-algebra helpers shared by the score models and the CMI engine.

use nalgebra::{Cholesky, DMatrix, DMatrixView, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on `d` for anything that materializes a `d × d × d` tensor.
pub const DEFAULT_DENSE_LIMIT: usize = 64;

/// Dense `d × d × d` array. Slice `[:, :, k]` is stored contiguously in
/// column-major order, so `slice(k)` is a zero-copy `d × d` view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    dim: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![0.0; dim * dim * dim] }
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(dim);
        for k in 0..dim {
            for j in 0..dim {
                for i in 0..dim {
                    t.data[(k * dim + j) * dim + i] = f(i, j, k);
                }
            }
        }
        t
    }

    pub fn from_slices(slices: &[DMatrix<f64>]) -> Result<Self> {
        let dim = slices.len();
        let mut data = Vec::with_capacity(dim * dim * dim);
        for (k, s) in slices.iter().enumerate() {
            if s.shape() != (dim, dim) {
                return Err(Error::shape(format!(
                    "slice {k} is {}x{}, expected {dim}x{dim}",
                    s.nrows(),
                    s.ncols()
                )));
            }
            data.extend_from_slice(s.as_slice());
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(k * self.dim + j) * self.dim + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, value: f64) {
        self.data[(k * self.dim + j) * self.dim + i] = value;
    }

    pub fn slice(&self, k: usize) -> DMatrixView<'_, f64> {
        let n = self.dim * self.dim;
        DMatrixView::from_slice(&self.data[k * n..(k + 1) * n], self.dim, self.dim)
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { dim: self.dim, data: self.data.iter().map(|v| v * c).collect() }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest deviation from full index symmetry over all six permutations.
    pub fn symmetry_defect(&self) -> f64 {
        let d = self.dim;
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    let v = self.get(i, j, k);
                    for w in [
                        self.get(i, k, j),
                        self.get(j, i, k),
                        self.get(j, k, i),
                        self.get(k, i, j),
                        self.get(k, j, i),
                    ] {
                        worst = worst.max((v - w).abs());
                    }
                }
            }
        }
        worst
    }
}

/// Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
}

impl SpdFactor {
    pub fn new(m: &DMatrix<f64>, what: &str) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::shape(format!("{what} is {}x{}, not square", m.nrows(), m.ncols())));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Factorization(format!("{what} has non-finite entries")));
        }
        Cholesky::new(m.clone())
            .map(|chol| Self { chol })
            .ok_or_else(|| Error::Factorization(format!("{what} is not positive definite")))
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// `log det` from twice the sum of the log-diagonal of the factor.
    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn solve_view(&self, b: DMatrixView<'_, f64>) -> DMatrix<f64> {
        self.chol.solve(&b.into_owned())
    }
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

pub fn relative_l2(estimate: &DVector<f64>, reference: &DVector<f64>) -> f64 {
    let denom = reference.norm();
    let diff = (estimate - reference).norm();
    if denom == 0.0 {
        diff
    } else {
        diff / denom
    }
}
