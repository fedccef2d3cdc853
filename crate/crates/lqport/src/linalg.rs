//! Small dense linear-algebra helpers shared by the solver modules.

use nalgebra::{Dyn, LU};

use crate::{Error, Matrix, Result, Vector};

/// Largest condition number accepted before a solve is refused.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Eigenvalues below `-PSD_TOLERANCE` are treated as a genuine violation.
pub const PSD_TOLERANCE: f64 = 1e-12;

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

pub fn singular_values(a: &Matrix) -> Vector {
    a.clone().singular_values()
}

/// Spectral (operator 2-) norm.
pub fn spectral_norm(a: &Matrix) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    singular_values(a).max()
}

/// Ratio of extreme singular values; infinite for singular input.
pub fn condition_number(a: &Matrix) -> f64 {
    let sv = singular_values(a);
    let lo = sv.min();
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        sv.max() / lo
    }
}

/// Eigenvalues of the symmetric part, ascending.
pub fn sym_eigenvalues(a: &Matrix) -> Vec<f64> {
    let mut ev: Vec<f64> = symmetrize(a).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    ev
}

/// LU factorization with partial pivoting, guarded by a condition-number check.
#[derive(Clone, Debug)]
pub struct Factorized {
    lu: LU<f64, Dyn, Dyn>,
    n: usize,
}

impl Factorized {
    pub fn new(a: &Matrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::arg(format!(
                "expected a square matrix, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::num("matrix has non-finite entries"));
        }
        let cond = condition_number(a);
        if !(cond <= CONDITION_LIMIT) {
            return Err(Error::num(format!(
                "linear system too ill-conditioned (condition number {cond:e})"
            )));
        }
        Ok(Factorized {
            lu: a.clone().lu(),
            n: a.nrows(),
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &Vector) -> Result<Vector> {
        if b.len() != self.n {
            return Err(Error::arg(format!(
                "right-hand side has length {}, expected {}",
                b.len(),
                self.n
            )));
        }
        self.lu
            .solve(b)
            .ok_or_else(|| Error::num("LU solve failed on a singular factor"))
    }

    pub fn solve_matrix(&self, b: &Matrix) -> Result<Matrix> {
        self.lu
            .solve(b)
            .ok_or_else(|| Error::num("LU solve failed on a singular factor"))
    }
}

/// Solve `a x = b` through a guarded LU factorization.
pub fn solve(a: &Matrix, b: &Vector) -> Result<Vector> {
    Factorized::new(a)?.solve(b)
}

/// Symmetrize and clip tiny negative eigenvalues to zero. Eigenvalues below
/// `-PSD_TOLERANCE` are reported as a numerical error.
pub fn repair_psd(a: &Matrix) -> Result<Matrix> {
    let s = symmetrize(a);
    let eig = s.clone().symmetric_eigen();
    let lo = eig.eigenvalues.min();
    if lo < -PSD_TOLERANCE {
        return Err(Error::num(format!("covariance has a negative eigenvalue {lo:e}")));
    }
    if lo >= 0.0 {
        return Ok(s);
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    Ok(&eig.eigenvectors * Matrix::from_diagonal(&clipped) * eig.eigenvectors.transpose())
}

/// A factor `L` with `L Lᵀ = a` for a positive semidefinite `a`: Cholesky when it
/// succeeds, otherwise the eigen square root of the repaired matrix.
pub fn psd_factor(a: &Matrix) -> Result<Matrix> {
    let s = symmetrize(a);
    if let Some(ch) = s.clone().cholesky() {
        return Ok(ch.l());
    }
    let repaired = repair_psd(&s)?;
    let eig = repaired.symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * Matrix::from_diagonal(&roots))
}
