//! Moment-matched resampling of the parameter ensemble.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal, Uniform};

use crate::ensemble::{covariance, Divisor, Ensemble};
use crate::error::{EnkiError, Result};
use crate::linalg::{frobenius_norm, retained_spectrum, DEFAULT_RANK_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResamplingMode {
    #[default]
    Off,
    EveryIteration,
}

/// Standardized base distribution of the raw draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BaseDistribution {
    /// Uniform on `[-sqrt 3, sqrt 3]`, kurtosis 1.8.
    Uniform,
    /// Standard normal, kurtosis 3.
    #[default]
    Gaussian,
    /// Laplace with scale `1/sqrt 2`, kurtosis 6.
    Laplace,
}

impl BaseDistribution {
    pub const ALL: [BaseDistribution; 3] = [
        BaseDistribution::Uniform,
        BaseDistribution::Gaussian,
        BaseDistribution::Laplace,
    ];

    pub fn kurtosis(self) -> f64 {
        match self {
            BaseDistribution::Uniform => 1.8,
            BaseDistribution::Gaussian => 3.0,
            BaseDistribution::Laplace => 6.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BaseDistribution::Uniform => "uniform",
            BaseDistribution::Gaussian => "gaussian",
            BaseDistribution::Laplace => "laplace",
        }
    }
}

impl fmt::Display for BaseDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaseDistribution {
    type Err = EnkiError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "gaussian" => Ok(Self::Gaussian),
            "laplace" => Ok(Self::Laplace),
            other => Err(EnkiError::InvalidConfig(format!(
                "unknown base distribution `{other}` (expected uniform, gaussian or laplace)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResamplingPolicy {
    pub mode: ResamplingMode,
    pub base: BaseDistribution,
    pub rank_tol: f64,
}

impl Default for ResamplingPolicy {
    fn default() -> Self {
        Self::off()
    }
}

impl ResamplingPolicy {
    pub fn off() -> Self {
        Self {
            mode: ResamplingMode::Off,
            base: BaseDistribution::Gaussian,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }

    pub fn every_iteration(base: BaseDistribution) -> Self {
        Self {
            mode: ResamplingMode::EveryIteration,
            base,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }

    pub fn is_on(&self) -> bool {
        self.mode == ResamplingMode::EveryIteration
    }

    /// The config spelling: `off`, `uniform`, `gaussian` or `laplace`.
    pub fn label(&self) -> &'static str {
        if self.is_on() {
            self.base.name()
        } else {
            "off"
        }
    }
}

impl FromStr for ResamplingPolicy {
    type Err = EnkiError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "off" {
            return Ok(Self::off());
        }
        s.parse().map(Self::every_iteration).map_err(|_| {
            EnkiError::InvalidConfig(format!(
                "unknown resampling `{s}` (expected off, uniform, gaussian or laplace)"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResampleReport {
    /// `||mean_post - mean_pre||`.
    pub mean_error: f64,
    /// `||C_post - C_pre||_F`.
    pub cov_error: f64,
    /// Per-coordinate kurtosis of the raw base draws.
    pub raw_kurtosis: Vec<f64>,
    /// Trace of the pre-resampling covariance.
    pub sigma_sq: f64,
    /// Largest eigenvalue of the pre-resampling covariance.
    pub sigma_sq_max: f64,
    /// Retained rank of the pre-resampling covariance.
    pub rank: usize,
}

/// `J x d` i.i.d. standardized draws.
pub fn sample_base<R: Rng + ?Sized>(
    base: BaseDistribution,
    j: usize,
    d: usize,
    rng: &mut R,
) -> DMatrix<f64> {
    match base {
        BaseDistribution::Gaussian => DMatrix::from_fn(j, d, |_, _| rng.sample(StandardNormal)),
        BaseDistribution::Uniform => {
            let a = 3f64.sqrt();
            let u = Uniform::new_inclusive(-a, a).expect("finite bounds");
            DMatrix::from_fn(j, d, |_, _| u.sample(rng))
        }
        BaseDistribution::Laplace => {
            let b = std::f64::consts::FRAC_1_SQRT_2;
            DMatrix::from_fn(j, d, |_, _| {
                let e: f64 = rng.sample(Exp1);
                if rng.random::<bool>() {
                    b * e
                } else {
                    -b * e
                }
            })
        }
    }
}

/// Empirical kurtosis `m4 / m2^2` of each column.
pub fn column_kurtosis(z: &DMatrix<f64>) -> Vec<f64> {
    let n = z.nrows() as f64;
    z.column_iter()
        .map(|c| {
            let m = c.iter().sum::<f64>() / n;
            let (m2, m4) = c.iter().fold((0.0, 0.0), |(a, b), v| {
                let d2 = (v - m) * (v - m);
                (a + d2, b + d2 * d2)
            });
            let (m2, m4) = (m2 / n, m4 / n);
            if m2 > 0.0 {
                m4 / (m2 * m2)
            } else {
                f64::NAN
            }
        })
        .collect()
}

/// Redraws `theta` from the policy's base distribution and corrects the draws
/// affinely so that the sample mean and covariance equal those of `theta`.
///
/// The raw draws are centred and projected onto the retained eigenvectors of
/// the target covariance, whitened with the inverse principal square root of
/// their own covariance there, and recoloured with the target eigenvalues.
/// For a full-rank target this equals whitening in the full space followed by
/// recolouring with the target's principal square root.
pub fn moment_matched_resample<R: Rng + ?Sized>(
    theta: &Ensemble,
    policy: &ResamplingPolicy,
    rng: &mut R,
) -> Result<(Ensemble, ResampleReport)> {
    if !policy.is_on() {
        return Ok((theta.clone(), ResampleReport::default()));
    }
    let (j, d) = (theta.size(), theta.dim());
    let mean = theta.mean();
    let target = covariance(theta, Divisor::PopulationJ);
    let spec = retained_spectrum(&target, policy.rank_tol)?;
    let r = spec.rank();
    let mut report = ResampleReport {
        sigma_sq: target.trace(),
        sigma_sq_max: spec.lambda_max,
        rank: r,
        ..ResampleReport::default()
    };
    if r == 0 {
        return Ok((theta.clone(), report));
    }

    let mut got = 0;
    for _ in 0..2 {
        let z = sample_base(policy.base, j, d, rng);
        report.raw_kurtosis = column_kurtosis(&z);
        let zc = Ensemble::new(z)?.deviations();
        let y = &zc * &spec.vectors;
        let cy = y.transpose() * &y / j as f64;
        let wspec = retained_spectrum(&cy, policy.rank_tol)?;
        got = wspec.rank();
        if got < r {
            continue;
        }
        // Cy^{-1/2} Lambda^{1/2} V^T
        let w = DMatrix::from_fn(r, r, |a, b| {
            (0..r)
                .map(|k| wspec.vectors[(a, k)] * wspec.vectors[(b, k)] / wspec.values[k].sqrt())
                .sum::<f64>()
                * spec.values[b].sqrt()
        });
        let dev = &y * w * spec.vectors.transpose();
        let out = Ensemble::new(DMatrix::from_fn(j, d, |row, i| mean[i] + dev[(row, i)]))?;
        report.mean_error = (out.mean() - &mean).norm();
        report.cov_error = frobenius_norm(&(covariance(&out, Divisor::PopulationJ) - &target));
        return Ok((out, report));
    }
    Err(EnkiError::RankDeficientResample { target: r, got })
}

/// `(1/J) sum_j ||post_j - pre_j||^2`.
pub fn resample_deviation_stats(pre: &Ensemble, post: &Ensemble) -> Result<f64> {
    if pre.size() != post.size() || pre.dim() != post.dim() {
        return Err(EnkiError::DimensionMismatch {
            context: "resample_deviation_stats shapes",
            expected: pre.size() * pre.dim(),
            got: post.size() * post.dim(),
        });
    }
    let diff = post.matrix() - pre.matrix();
    Ok(diff.iter().map(|v| v * v).sum::<f64>() / pre.size() as f64)
}
