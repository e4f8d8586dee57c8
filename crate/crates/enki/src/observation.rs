use nalgebra::{DMatrix, DVector};

use crate::error::{EnkiError, Result};
use crate::linalg::{asymmetry, retained_spectrum, DEFAULT_RANK_TOL};

/// Linear observation operator `H`, mean observation `y_bar` and noise covariance `Gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSpec {
    pub h: DMatrix<f64>,
    pub y_bar: DVector<f64>,
    pub gamma: DMatrix<f64>,
}

impl ObservationSpec {
    pub fn new(h: DMatrix<f64>, y_bar: DVector<f64>, gamma: DMatrix<f64>) -> Result<Self> {
        let dy = h.nrows();
        if y_bar.len() != dy {
            return Err(EnkiError::DimensionMismatch {
                context: "observation mean",
                expected: dy,
                got: y_bar.len(),
            });
        }
        if gamma.nrows() != dy || gamma.ncols() != dy {
            return Err(EnkiError::DimensionMismatch {
                context: "observation noise covariance",
                expected: dy,
                got: if gamma.nrows() != dy {
                    gamma.nrows()
                } else {
                    gamma.ncols()
                },
            });
        }
        if !h
            .iter()
            .chain(y_bar.iter())
            .chain(gamma.iter())
            .all(|v| v.is_finite())
        {
            return Err(EnkiError::NonFinite {
                what: "observation spec",
            });
        }
        let asym = asymmetry(&gamma);
        if asym > 1e-12 {
            return Err(EnkiError::NotSymmetric { asymmetry: asym });
        }
        retained_spectrum(&gamma, DEFAULT_RANK_TOL)?;
        Ok(Self { h, y_bar, gamma })
    }

    /// `Gamma = alpha * I` with `alpha > 0`.
    pub fn with_scalar_noise(h: DMatrix<f64>, y_bar: DVector<f64>, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(EnkiError::InvalidConfig(format!(
                "scalar noise level must be positive, got {alpha}"
            )));
        }
        let dy = h.nrows();
        Self::new(h, y_bar, DMatrix::identity(dy, dy) * alpha)
    }

    pub fn d_y(&self) -> usize {
        self.h.nrows()
    }

    pub fn d_x(&self) -> usize {
        self.h.ncols()
    }

    /// Returns `alpha` when `Gamma = alpha * I` exactly.
    pub fn scalar_noise(&self) -> Option<f64> {
        let a = self.gamma[(0, 0)];
        let iso = DMatrix::identity(self.d_y(), self.d_y()) * a;
        (self.gamma == iso).then_some(a)
    }
}
