//! Cyclic tridiagonal solver without pivoting.
//!
//! Intended for diagonally dominant M-matrices (positive diagonal, nonpositive
//! off-diagonals). Gaussian elimination on such matrices keeps every pivot
//! positive and every multiplier nonnegative, so a nonnegative right-hand side
//! yields a nonnegative solution with no cancellation.

use crate::error::{Error, Result};

/// Row `i` reads `lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1]`, indices
/// taken modulo `n`.
#[derive(Debug, Clone)]
pub struct CyclicTridiag {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl CyclicTridiag {
    pub fn zeros(n: usize) -> Self {
        Self {
            lower: vec![0.0; n],
            diag: vec![0.0; n],
            upper: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let im = if i == 0 { n - 1 } else { i - 1 };
                let ip = if i + 1 == n { 0 } else { i + 1 };
                self.lower[i] * x[im] + self.diag[i] * x[i] + self.upper[i] * x[ip]
            })
            .collect()
    }

    /// Transposed matrix.
    pub fn transpose(&self) -> Self {
        let n = self.len();
        let mut t = Self::zeros(n);
        for i in 0..n {
            let im = if i == 0 { n - 1 } else { i - 1 };
            let ip = if i + 1 == n { 0 } else { i + 1 };
            t.diag[i] = self.diag[i];
            // (A^T)[i][i+1] = A[i+1][i] = lower[i+1]
            t.upper[i] = self.lower[ip];
            t.lower[i] = self.upper[im];
        }
        t
    }

    /// Solve `A x = rhs` by elimination with fill-in confined to the last row
    /// and column.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.len();
        if n < 3 || rhs.len() != n {
            return Err(Error::Solver(format!(
                "cyclic system of size {n} with rhs of length {}",
                rhs.len()
            )));
        }
        let last = n - 1;
        let mut d = self.diag.clone();
        let mut up = self.upper.clone();
        let mut b = rhs.to_vec();
        // c[i]: entry of row i in the last column (i < n-2)
        let mut c = vec![0.0; n];
        c[0] = self.lower[0];
        // r[j]: entry of the last row in column j (j < n-1)
        let mut r = vec![0.0; n];
        r[0] = self.upper[last];
        r[n - 2] += self.lower[last];
        for i in 0..last {
            let piv = d[i];
            if !(piv > 0.0) {
                return Err(Error::Solver(format!(
                    "nonpositive pivot {piv:e} at row {i}"
                )));
            }
            if i + 1 < last {
                let m = self.lower[i + 1] / piv;
                d[i + 1] -= m * up[i];
                b[i + 1] -= m * b[i];
                if i + 1 == n - 2 {
                    up[i + 1] -= m * c[i];
                } else {
                    c[i + 1] -= m * c[i];
                }
            }
            let m = r[i] / piv;
            b[last] -= m * b[i];
            if i + 1 == last {
                d[last] -= m * up[i];
            } else {
                r[i + 1] -= m * up[i];
                d[last] -= m * c[i];
            }
        }
        if !(d[last] > 0.0) {
            return Err(Error::Solver(format!(
                "nonpositive pivot {:e} at row {last}",
                d[last]
            )));
        }
        let mut x = vec![0.0; n];
        x[last] = b[last] / d[last];
        for i in (0..last).rev() {
            x[i] = (b[i] - up[i] * x[i + 1] - c[i] * x[last]) / d[i];
        }
        Ok(x)
    }
}
