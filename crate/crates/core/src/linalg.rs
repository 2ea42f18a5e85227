//! Symmetric positive-definite solves for sieve normal equations.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Above this condition number a fit still succeeds but is flagged.
pub const CONDITION_WARN: f64 = 1e10;
/// At or above this condition number the system is treated as singular.
pub const CONDITION_SINGULAR: f64 = 1e13;

/// Sample second-moment accumulator for `mean φφᵀ` and `mean φ·t`.
pub struct Normal {
    pub gram: DMatrix<f64>,
    pub rhs: DVector<f64>,
    count: usize,
}

impl Normal {
    pub fn new(dim: usize) -> Self {
        Normal {
            gram: DMatrix::zeros(dim, dim),
            rhs: DVector::zeros(dim),
            count: 0,
        }
    }

    /// Adds `weight · φφᵀ` to the Gram and `target` to the right-hand side.
    pub fn push(&mut self, phi: &[f64], weight: f64, target: &[f64]) {
        let p = phi.len();
        for i in 0..p {
            let wi = weight * phi[i];
            for j in 0..=i {
                self.gram[(i, j)] += wi * phi[j];
            }
            self.rhs[i] += target[i];
        }
        self.count += 1;
    }

    /// Divides by the number of rows and fills the upper triangle.
    pub fn finish(mut self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.count.max(1) as f64;
        let p = self.gram.nrows();
        for i in 0..p {
            for j in 0..=i {
                let v = self.gram[(i, j)] / n;
                self.gram[(i, j)] = v;
                self.gram[(j, i)] = v;
            }
        }
        self.rhs /= n;
        (self.gram, self.rhs)
    }
}

/// `λ·D` where `D` is the identity with a zero for the intercept column.
pub fn ridge_matrix(dim: usize, lambda: f64, intercept: Option<usize>) -> DMatrix<f64> {
    let mut d = DMatrix::identity(dim, dim) * lambda;
    if let Some(i) = intercept {
        d[(i, i)] = 0.0;
    }
    d
}

/// Scale-aware ridge default `1e-6 · trace(G) / dim(G)`.
pub fn auto_lambda(gram: &DMatrix<f64>) -> f64 {
    1e-6 * gram.trace() / gram.nrows() as f64
}

pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves `m x = b` for symmetric positive-definite `m` by Cholesky.
///
/// Refuses (rather than pseudo-inverting) when the factorisation fails or
/// the condition number reaches [`CONDITION_SINGULAR`]. Returns the solution
/// and the condition number.
pub fn solve_spd(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let cond = condition_number(m);
    if !(cond < CONDITION_SINGULAR) {
        return Err(Error::numerical(format!(
            "singular Gram matrix (condition number {cond:.3e}); use a ridge penalty > 0 or a smaller basis"
        )));
    }
    let chol = m.clone().cholesky().ok_or_else(|| {
        Error::numerical("Gram matrix is not positive definite; use a ridge penalty > 0 or a smaller basis")
    })?;
    if cond > CONDITION_WARN {
        log::warn!("ill-conditioned Gram matrix: condition number {cond:.3e}");
    }
    Ok((chol.solve(b), cond))
}
