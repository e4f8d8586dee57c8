use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{EnkiError, Result};

/// Default relative eigenvalue cutoff for principal square roots.
pub const DEFAULT_RANK_TOL: f64 = 1e-12;

const SYMMETRY_TOL: f64 = 1e-10;

pub fn frobenius_norm(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone()
        .singular_values()
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Relative asymmetry `||A - A^T||_F / ||A||_F` (0 for the zero matrix).
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = frobenius_norm(a);
    if n == 0.0 {
        return 0.0;
    }
    frobenius_norm(&(a - a.transpose())) / n
}

fn check_square(a: &DMatrix<f64>, context: &'static str) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(EnkiError::DimensionMismatch {
            context,
            expected: a.nrows(),
            got: a.ncols(),
        });
    }
    Ok(())
}

fn symmetrized(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let asym = asymmetry(a);
    if asym > SYMMETRY_TOL {
        return Err(EnkiError::NotSymmetric { asymmetry: asym });
    }
    Ok((a + a.transpose()) * 0.5)
}

fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

// One step of iterative refinement against the factored matrix.
fn refine(a: &DMatrix<f64>, b: &DMatrix<f64>, ch: &Cholesky<f64, Dyn>) -> DMatrix<f64> {
    let x = ch.solve(b);
    let r = b - a * &x;
    x + ch.solve(&r)
}

/// Solves `A X = B` for symmetric positive (semi)definite `A` by Cholesky.
///
/// If the factorization fails, retries once with `1e-12 * trace(A) / d` added to
/// the diagonal.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square(a, "spd_solve matrix")?;
    if b.nrows() != a.nrows() {
        return Err(EnkiError::DimensionMismatch {
            context: "spd_solve right-hand side",
            expected: a.nrows(),
            got: b.nrows(),
        });
    }
    let a = symmetrized(a)?;
    if let Some(ch) = a.clone().cholesky() {
        return Ok(refine(&a, b, &ch));
    }
    let d = a.nrows();
    let jitter = 1e-12 * a.trace() / d as f64;
    if jitter > 0.0 {
        let mut aj = a.clone();
        for i in 0..d {
            aj[(i, i)] += jitter;
        }
        if let Some(ch) = aj.clone().cholesky() {
            return Ok(refine(&aj, b, &ch));
        }
    }
    Err(EnkiError::SingularSystem {
        min_eigenvalue: min_eigenvalue(&a),
    })
}

/// Eigenpairs of a symmetric PSD matrix restricted to eigenvalues above
/// `rank_tol * lambda_max`.
#[derive(Debug, Clone)]
pub struct RetainedSpectrum {
    pub values: DVector<f64>,
    /// Columns are the retained eigenvectors.
    pub vectors: DMatrix<f64>,
    pub lambda_max: f64,
}

impl RetainedSpectrum {
    pub fn rank(&self) -> usize {
        self.values.len()
    }

    fn rebuild(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.vectors.nrows(), self.rank(), |i, k| {
            self.vectors[(i, k)] * f(self.values[k])
        });
        &scaled * self.vectors.transpose()
    }
}

pub fn retained_spectrum(a: &DMatrix<f64>, rank_tol: f64) -> Result<RetainedSpectrum> {
    check_square(a, "symmetric eigendecomposition")?;
    let a = symmetrized(a)?;
    let n = a.nrows();
    let SymmetricEigen {
        eigenvalues,
        eigenvectors,
    } = a.symmetric_eigen();
    let lambda_max = eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let lambda_min = eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if lambda_min < -rank_tol * lambda_max || (lambda_max == 0.0 && lambda_min < 0.0) {
        return Err(EnkiError::NotPsd {
            min_eigenvalue: lambda_min,
        });
    }
    let mut keep: Vec<usize> = (0..n)
        .filter(|&i| lambda_max > 0.0 && eigenvalues[i] > rank_tol * lambda_max)
        .collect();
    // Descending order makes the result independent of the solver's ordering.
    keep.sort_by(|&x, &y| eigenvalues[y].total_cmp(&eigenvalues[x]));
    Ok(RetainedSpectrum {
        values: DVector::from_iterator(keep.len(), keep.iter().map(|&i| eigenvalues[i])),
        vectors: DMatrix::from_fn(n, keep.len(), |r, k| eigenvectors[(r, keep[k])]),
        lambda_max,
    })
}

/// Principal square root `V diag(sqrt(lambda)) V^T` over the retained eigenvalues,
/// with the retained rank.
pub fn principal_sqrt(a: &DMatrix<f64>, rank_tol: f64) -> Result<(DMatrix<f64>, usize)> {
    let s = retained_spectrum(a, rank_tol)?;
    Ok((s.rebuild(f64::sqrt), s.rank()))
}

/// Pseudo-inverse of the principal square root.
pub fn principal_inv_sqrt(a: &DMatrix<f64>, rank_tol: f64) -> Result<(DMatrix<f64>, usize)> {
    let s = retained_spectrum(a, rank_tol)?;
    Ok((s.rebuild(|l| 1.0 / l.sqrt()), s.rank()))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn symmetric_min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    min_eigenvalue(&((a + a.transpose()) * 0.5))
}

/// Largest eigenvalue of a symmetric matrix.
pub fn symmetric_max_eigenvalue(a: &DMatrix<f64>) -> f64 {
    ((a + a.transpose()) * 0.5)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}
