use nalgebra::{DMatrix, DVector};

use crate::error::{EnkiError, Result};

/// Divisor used for empirical covariances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Divisor {
    /// `1/J`.
    #[default]
    PopulationJ,
    /// `1/(J-1)`.
    SampleJminus1,
}

impl Divisor {
    pub fn factor(self, j: usize) -> f64 {
        match self {
            Divisor::PopulationJ => 1.0 / j as f64,
            Divisor::SampleJminus1 => 1.0 / (j as f64 - 1.0),
        }
    }
}

/// A `J`-member collection of `d`-dimensional vectors, stored one member per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: DMatrix<f64>,
}

impl Ensemble {
    /// Wraps a `J x d` matrix whose rows are the members.
    pub fn new(members: DMatrix<f64>) -> Result<Self> {
        if members.nrows() < 2 {
            return Err(EnkiError::TooFewMembers(members.nrows()));
        }
        if members.ncols() == 0 {
            return Err(EnkiError::InvalidConfig(
                "ensemble members must have dimension >= 1".into(),
            ));
        }
        Ok(Self { members })
    }

    pub fn from_members(members: &[DVector<f64>]) -> Result<Self> {
        if members.len() < 2 {
            return Err(EnkiError::TooFewMembers(members.len()));
        }
        let d = members[0].len();
        for m in members {
            if m.len() != d {
                return Err(EnkiError::DimensionMismatch {
                    context: "ensemble member",
                    expected: d,
                    got: m.len(),
                });
            }
        }
        Self::new(DMatrix::from_fn(members.len(), d, |j, i| members[j][i]))
    }

    /// `J` copies of `v`.
    pub fn constant(v: &DVector<f64>, j: usize) -> Result<Self> {
        Self::new(DMatrix::from_fn(j, v.len(), |_, i| v[i]))
    }

    pub fn size(&self) -> usize {
        self.members.nrows()
    }

    pub fn dim(&self) -> usize {
        self.members.ncols()
    }

    pub fn member(&self, j: usize) -> DVector<f64> {
        self.members.row(j).transpose()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.members
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.members
    }

    pub fn mean(&self) -> DVector<f64> {
        ensemble_mean(self)
    }

    /// Member deviations from the ensemble mean.
    pub fn deviations(&self) -> DMatrix<f64> {
        let m = self.mean();
        DMatrix::from_fn(self.size(), self.dim(), |j, i| self.members[(j, i)] - m[i])
    }

    pub fn is_finite(&self) -> bool {
        self.members.iter().all(|v| v.is_finite())
    }
}

/// Arithmetic mean of the members.
///
/// Offsets from the first member are summed left to right in member order and
/// added back, so a constant ensemble returns its member exactly.
pub fn ensemble_mean(e: &Ensemble) -> DVector<f64> {
    let (j, d) = e.members.shape();
    let mut out = DVector::zeros(d);
    for i in 0..d {
        let base = e.members[(0, i)];
        let mut s = 0.0;
        for r in 1..j {
            s += e.members[(r, i)] - base;
        }
        out[i] = base + s / j as f64;
    }
    out
}

/// An empirical covariance together with the divisor it was computed with.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix {
    pub data: DMatrix<f64>,
    pub divisor: Divisor,
}

/// Cross covariance of two deviation matrices sharing the member count.
///
/// Entry `(p, q)` is accumulated in member order from `da[j,p] * db[j,q]`, so
/// swapping the arguments yields the exact transpose.
pub(crate) fn deviation_covariance(
    da: &DMatrix<f64>,
    db: &DMatrix<f64>,
    divisor: Divisor,
) -> DMatrix<f64> {
    let j = da.nrows();
    let f = divisor.factor(j);
    DMatrix::from_fn(da.ncols(), db.ncols(), |p, q| {
        let mut s = 0.0;
        for r in 0..j {
            s += da[(r, p)] * db[(r, q)];
        }
        s * f
    })
}

pub fn cross_covariance(a: &Ensemble, b: &Ensemble, divisor: Divisor) -> Result<CovMatrix> {
    if a.size() != b.size() {
        return Err(EnkiError::DimensionMismatch {
            context: "cross_covariance member count",
            expected: a.size(),
            got: b.size(),
        });
    }
    Ok(CovMatrix {
        data: deviation_covariance(&a.deviations(), &b.deviations(), divisor),
        divisor,
    })
}

/// Self covariance `cross_covariance(e, e)`.
pub fn covariance(e: &Ensemble, divisor: Divisor) -> DMatrix<f64> {
    let d = e.deviations();
    deviation_covariance(&d, &d, divisor)
}
