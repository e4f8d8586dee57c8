//! Per-iteration records and numerical checks of the convergence analysis.

use nalgebra::{Complex, DMatrix, DVector};

use crate::ensemble::{covariance, Divisor, Ensemble};
use crate::error::{EnkiError, Result};
use crate::kalman::{gains_from_moments, IterationState, KalmanGains, PriorMoments};
use crate::linalg::{frobenius_norm, spd_solve, spectral_norm, symmetric_min_eigenvalue};
use crate::observation::ObservationSpec;
use crate::problems::{model_gradient, ForwardModel};
use crate::resampling::ResampleReport;

/// Covariance and gain changes caused by one resampling step.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampleCheck {
    pub report: ResampleReport,
    /// `||C_{theta_r, x_r} - C_{theta, x}||_F`
    pub delta_c_theta_x: f64,
    /// `||C_{x_r, x_r} - C_{x, x}||_F`
    pub delta_c_x_x: f64,
    /// `||C_{theta, x}||_F` before resampling.
    pub norm_c_theta_x: f64,
    /// `||C_{x, x}||_F` before resampling.
    pub norm_c_x_x: f64,
    /// `||K_before - K_after||_F`
    pub gain_delta: f64,
}

/// Compares the moments and gains of `(theta, f(theta))` with those of the
/// resampled pair.
pub fn resample_check(
    theta: &Ensemble,
    x: &Ensemble,
    theta_r: &Ensemble,
    x_r: &Ensemble,
    obs: &ObservationSpec,
    report: ResampleReport,
    divisor: Divisor,
) -> Result<ResampleCheck> {
    let before = PriorMoments::new(theta, x, divisor)?;
    let after = PriorMoments::new(theta_r, x_r, divisor)?;
    let k_before = gains_from_moments(&before, obs)?.k;
    let k_after = gains_from_moments(&after, obs)?.k;
    Ok(ResampleCheck {
        report,
        delta_c_theta_x: frobenius_norm(&(&after.c_theta_x - &before.c_theta_x)),
        delta_c_x_x: frobenius_norm(&(&after.c_x_x - &before.c_x_x)),
        norm_c_theta_x: frobenius_norm(&before.c_theta_x),
        norm_c_x_x: frobenius_norm(&before.c_x_x),
        gain_delta: frobenius_norm(&(k_after - k_before)),
    })
}

/// Diagnostics for one iteration. Covariance norms refer to the prior
/// ensembles the gains were built from; `theta_mean` is the posterior mean.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub t: usize,
    pub norm_c_theta_theta: f64,
    pub norm_c_theta_hx: f64,
    pub norm_c_hx_hx: f64,
    pub norm_k: f64,
    /// `||y_bar - H f(theta_mean)||^2`
    pub innovation: f64,
    pub theta_mean: DVector<f64>,
    pub x_prior_mean: DVector<f64>,
    pub x_post_mean: DVector<f64>,
    pub gain_delta_after_resample: f64,
    /// Trace of the posterior parameter covariance before any resampling.
    pub sigma_sq: f64,
    pub gain: DMatrix<f64>,
    /// Prior state covariance.
    pub c_x_x: DMatrix<f64>,
    /// Smallest eigenvalue of `H C_xx H^T`.
    pub lambda_min_hch: f64,
    pub resample: Option<ResampleCheck>,
}

impl IterationRecord {
    pub fn is_finite(&self) -> bool {
        [
            self.norm_c_theta_theta,
            self.norm_c_theta_hx,
            self.norm_c_hx_hx,
            self.norm_k,
            self.innovation,
            self.gain_delta_after_resample,
            self.sigma_sq,
        ]
        .iter()
        .chain(self.theta_mean.iter())
        .chain(self.x_prior_mean.iter())
        .chain(self.x_post_mean.iter())
        .all(|v| v.is_finite())
    }
}

/// Assembles the record for one iteration from the prior state, its gains and
/// the (pre-resampling) posterior ensembles.
pub fn record_iteration(
    state: &IterationState,
    gains: &KalmanGains,
    post: (&Ensemble, &Ensemble),
    obs: &ObservationSpec,
    model: &dyn ForwardModel,
    resample: Option<ResampleCheck>,
    divisor: Divisor,
) -> Result<IterationRecord> {
    let (theta_post, x_post) = post;
    let m = PriorMoments::new(&state.theta_prior, &state.x_prior, divisor)?;
    let h = &obs.h;
    let c_hx_hx = m.c_hx_hx(h);
    let theta_mean = theta_post.mean();
    let sigma_sq = match &resample {
        Some(c) => c.report.sigma_sq,
        None => covariance(theta_post, divisor).trace(),
    };
    Ok(IterationRecord {
        t: state.t,
        norm_c_theta_theta: frobenius_norm(&m.c_theta_theta),
        norm_c_theta_hx: frobenius_norm(&m.c_theta_hx(h)),
        norm_c_hx_hx: frobenius_norm(&c_hx_hx),
        norm_k: frobenius_norm(&gains.k),
        innovation: crate::kalman::innovation_norm(&theta_mean, model, obs),
        theta_mean,
        x_prior_mean: state.x_prior.mean(),
        x_post_mean: x_post.mean(),
        gain_delta_after_resample: resample.as_ref().map_or(0.0, |c| c.gain_delta),
        sigma_sq,
        gain: gains.k.clone(),
        lambda_min_hch: symmetric_min_eigenvalue(&c_hx_hx),
        c_x_x: m.c_x_x,
        resample,
    })
}

/// One application of `C_tt - C_tHx (C_HxHx + Gamma)^-1 C_tHx^T`.
pub fn covariance_recursion_step(
    c_tt: &DMatrix<f64>,
    c_thx: &DMatrix<f64>,
    c_hxhx: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if c_thx.nrows() != c_tt.nrows() || c_thx.ncols() != c_hxhx.nrows() {
        return Err(EnkiError::DimensionMismatch {
            context: "covariance_recursion_step cross covariance",
            expected: c_tt.nrows(),
            got: c_thx.nrows(),
        });
    }
    let s = c_hxhx + gamma;
    let x = spd_solve(&s, &c_thx.transpose())?;
    let out = c_tt - c_thx * x;
    Ok((&out + out.transpose()) * 0.5)
}

/// `(alpha / (delta + alpha))^t * norm_c1`.
pub fn shrinkage_bound(alpha: f64, delta: f64, t: u32, norm_c1: f64) -> f64 {
    (alpha / (delta + alpha)).powi(t as i32) * norm_c1
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkageStep {
    pub t: usize,
    pub factor: f64,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs - lhs`; negative on failure.
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkageReport {
    pub steps: Vec<ShrinkageStep>,
}

impl ShrinkageReport {
    pub fn all_pass(&self) -> bool {
        self.steps.iter().all(|s| s.pass)
    }
}

/// Checks `||C_{Hx,theta}||_F(t+1) <= alpha / (lambda_min(t) + alpha) * ||C_{Hx,theta}||_F(t)`
/// for consecutive records, with relative tolerance `1e-9`.
///
/// Meant for traces produced in update-only mode.
pub fn check_per_step_shrinkage(
    trace: &[IterationRecord],
    alpha: f64,
    lambda_min_seq: &[f64],
) -> ShrinkageReport {
    let steps = trace
        .windows(2)
        .zip(lambda_min_seq)
        .map(|(w, &lambda)| {
            let factor = alpha / (lambda.max(0.0) + alpha);
            let rhs = factor * w[0].norm_c_theta_hx;
            let lhs = w[1].norm_c_theta_hx;
            ShrinkageStep {
                t: w[0].t,
                factor,
                lhs,
                rhs,
                margin: rhs - lhs,
                pass: lhs <= rhs * (1.0 + 1e-9),
            }
        })
        .collect();
    ShrinkageReport { steps }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyStateReport {
    /// `H x_post_mean - H x_prior_mean`
    pub oscillation: DVector<f64>,
    /// `H x_prior_mean - y_bar`
    pub prior_error: DVector<f64>,
    /// `H x_post_mean - y_bar`
    pub post_error: DVector<f64>,
    /// `H C H^T (H C H^T + Gamma)^-1 (y_bar - H x_prior_mean)`
    pub predicted_oscillation: DVector<f64>,
    /// `Gamma (H C H^T + Gamma)^-1 (H x_prior_mean - y_bar)`
    pub predicted_post_error: DVector<f64>,
    /// Larger of the two relative mismatches between measured and predicted values.
    pub identity_residual: f64,
}

fn relative_mismatch(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).norm() / scale
    }
}

/// Compares the measured prior/posterior output means with the closed-form
/// relations they satisfy at a fixed point.
pub fn steady_state_check(
    x_prior_mean: &DVector<f64>,
    x_post_mean: &DVector<f64>,
    c_xx: &DMatrix<f64>,
    obs: &ObservationSpec,
) -> Result<SteadyStateReport> {
    let h = &obs.h;
    let hx_prior = h * x_prior_mean;
    let hx_post = h * x_post_mean;
    let hch = h * c_xx * h.transpose();
    let s = &hch + &obs.gamma;
    let prior_error = &hx_prior - &obs.y_bar;
    let solved = spd_solve(
        &s,
        &DMatrix::from_column_slice(obs.d_y(), 1, prior_error.as_slice()),
    )?
    .column(0)
    .into_owned();
    let predicted_oscillation = -(&hch * &solved);
    let predicted_post_error = &obs.gamma * &solved;
    let oscillation = &hx_post - &hx_prior;
    let post_error = &hx_post - &obs.y_bar;
    let identity_residual = relative_mismatch(&oscillation, &predicted_oscillation)
        .max(relative_mismatch(&post_error, &predicted_post_error));
    Ok(SteadyStateReport {
        oscillation,
        prior_error,
        post_error,
        predicted_oscillation,
        predicted_post_error,
        identity_residual,
    })
}

/// Bounds on `||dC_{theta,x}||_F` and `||dC_{x,x}||_F` after a moment-matched
/// resample, for a model whose Jacobian norm is at most `m`:
/// `(2 sqrt 2 M sigma^2, 2 sqrt 2 M^2 sigma^2)`.
pub fn theorem1_bound(m: f64, sigma_sq: f64) -> (f64, f64) {
    let c = 2.0 * std::f64::consts::SQRT_2;
    (c * m * sigma_sq, c * m * m * sigma_sq)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionSpectrum {
    pub a: DMatrix<f64>,
    /// Sorted by increasing modulus.
    pub eigenvalues: Vec<Complex<f64>>,
}

/// Assembles `A = [[I, -K], [H grad_f, -H grad_f K]]` and its eigenvalues.
pub fn evolution_matrix(
    grad_f: &DMatrix<f64>,
    h: &DMatrix<f64>,
    k: &DMatrix<f64>,
) -> Result<EvolutionSpectrum> {
    let (d_theta, d_y) = k.shape();
    if grad_f.ncols() != d_theta || h.ncols() != grad_f.nrows() || h.nrows() != d_y {
        return Err(EnkiError::DimensionMismatch {
            context: "evolution_matrix blocks",
            expected: d_theta,
            got: grad_f.ncols(),
        });
    }
    let hg = h * grad_f;
    let n = d_theta + d_y;
    let mut a = DMatrix::zeros(n, n);
    a.view_mut((0, 0), (d_theta, d_theta))
        .copy_from(&DMatrix::identity(d_theta, d_theta));
    a.view_mut((0, d_theta), (d_theta, d_y)).copy_from(&(-k));
    a.view_mut((d_theta, 0), (d_y, d_theta)).copy_from(&hg);
    a.view_mut((d_theta, d_theta), (d_y, d_y))
        .copy_from(&(-(&hg * k)));
    let mut eigenvalues: Vec<Complex<f64>> = a.complex_eigenvalues().iter().cloned().collect();
    eigenvalues.sort_by(|x, y| x.norm().total_cmp(&y.norm()));
    Ok(EvolutionSpectrum { a, eigenvalues })
}

/// Axis-aligned box `[lower, upper]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRegion {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl BoxRegion {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(EnkiError::DimensionMismatch {
                context: "box bounds",
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower
            .iter()
            .zip(upper.iter())
            .any(|(l, u)| l.is_nan() || u.is_nan() || l > u)
        {
            return Err(EnkiError::InvalidConfig(
                "box lower bound exceeds upper bound".into(),
            ));
        }
        Ok(Self { lower, upper })
    }

    /// Bounding box of the rows of `points`, padded by `pad` on each side.
    pub fn hull(points: &DMatrix<f64>, pad: f64) -> Self {
        let d = points.ncols();
        let lower = DVector::from_fn(d, |i, _| points.column(i).min() - pad);
        let upper = DVector::from_fn(d, |i, _| points.column(i).max() + pad);
        Self { lower, upper }
    }

    /// Smallest box containing both.
    pub fn union(&self, other: &BoxRegion) -> Self {
        Self {
            lower: self.lower.zip_map(&other.lower, f64::min),
            upper: self.upper.zip_map(&other.upper, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientNormBound {
    pub value: f64,
    pub argmax: DVector<f64>,
}

/// Largest spectral norm of the Jacobian over a `grid^d` lattice on `region`.
///
/// This is a lower estimate of the supremum over the box.
pub fn gradient_norm_bound(
    model: &dyn ForwardModel,
    region: &BoxRegion,
    grid: usize,
) -> Result<GradientNormBound> {
    let d = model.d_theta();
    if region.lower.len() != d {
        return Err(EnkiError::DimensionMismatch {
            context: "gradient_norm_bound region",
            expected: d,
            got: region.lower.len(),
        });
    }
    if grid == 0 {
        return Err(EnkiError::InvalidConfig(
            "grid must have at least one point".into(),
        ));
    }
    let coord = |i: usize, k: usize| {
        if grid == 1 {
            0.5 * (region.lower[i] + region.upper[i])
        } else {
            region.lower[i] + (region.upper[i] - region.lower[i]) * k as f64 / (grid - 1) as f64
        }
    };
    let total = grid
        .checked_pow(d as u32)
        .ok_or_else(|| EnkiError::InvalidConfig(format!("grid {grid}^{d} is too large")))?;
    let mut best = GradientNormBound {
        value: f64::NEG_INFINITY,
        argmax: DVector::zeros(d),
    };
    let mut theta = DVector::zeros(d);
    for mut idx in 0..total {
        for i in 0..d {
            theta[i] = coord(i, idx % grid);
            idx /= grid;
        }
        let n = spectral_norm(&model_gradient(model, &theta));
        if n > best.value {
            best.value = n;
            best.argmax = theta.clone();
        }
    }
    Ok(best)
}
