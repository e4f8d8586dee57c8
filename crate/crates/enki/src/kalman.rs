//! One iteration of the ensemble Kalman filter: perturbed observations, gains,
//! update and prediction.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::ensemble::{deviation_covariance, Divisor, Ensemble};
use crate::error::{EnkiError, Result};
use crate::linalg::{principal_sqrt, spd_solve, DEFAULT_RANK_TOL};
use crate::observation::ObservationSpec;
use crate::problems::ForwardModel;

/// Parameter gain `K` and state gain `K'`, computed from one factorization of
/// `H C_xx H^T + Gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanGains {
    pub k: DMatrix<f64>,
    pub k_prime: DMatrix<f64>,
}

/// Prior ensembles at iteration `t`, with `x_prior[j] = f(theta_prior[j])`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationState {
    pub theta_prior: Ensemble,
    pub x_prior: Ensemble,
    pub t: usize,
}

/// Empirical moments of a prior pair that the gains and diagnostics share.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMoments {
    pub c_theta_theta: DMatrix<f64>,
    pub c_theta_x: DMatrix<f64>,
    pub c_x_x: DMatrix<f64>,
}

impl PriorMoments {
    pub fn new(theta: &Ensemble, x: &Ensemble, divisor: Divisor) -> Result<Self> {
        if theta.size() != x.size() {
            return Err(EnkiError::DimensionMismatch {
                context: "prior ensemble member counts",
                expected: theta.size(),
                got: x.size(),
            });
        }
        let dt = theta.deviations();
        let dx = x.deviations();
        Ok(Self {
            c_theta_theta: deviation_covariance(&dt, &dt, divisor),
            c_theta_x: deviation_covariance(&dt, &dx, divisor),
            c_x_x: deviation_covariance(&dx, &dx, divisor),
        })
    }

    /// `C_{theta, Hx} = C_theta_x H^T`.
    pub fn c_theta_hx(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        &self.c_theta_x * h.transpose()
    }

    /// `C_{Hx, Hx} = H C_xx H^T`.
    pub fn c_hx_hx(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        h * &self.c_x_x * h.transpose()
    }
}

/// `J` draws `y_j = y_bar + S xi_j` with `S S^T = Gamma`.
///
/// The noise terms are re-centred after drawing, so the sample mean of the
/// returned ensemble equals `y_bar` up to rounding.
pub fn perturb_observations<R: Rng + ?Sized>(
    obs: &ObservationSpec,
    j: usize,
    rng: &mut R,
) -> Result<Ensemble> {
    if j < 2 {
        return Err(EnkiError::TooFewMembers(j));
    }
    let dy = obs.d_y();
    let (s, _) = principal_sqrt(&obs.gamma, DEFAULT_RANK_TOL)?;
    let xi = DMatrix::<f64>::from_fn(j, dy, |_, _| rng.sample(StandardNormal));
    let noise = Ensemble::new(&xi * s.transpose())?.deviations();
    Ensemble::new(DMatrix::from_fn(j, dy, |r, i| obs.y_bar[i] + noise[(r, i)]))
}

/// `J` copies of `y_bar`.
pub fn unperturbed_observations(obs: &ObservationSpec, j: usize) -> Result<Ensemble> {
    Ensemble::constant(&obs.y_bar, j)
}

fn check_prior(theta: &Ensemble, x: &Ensemble, obs: &ObservationSpec) -> Result<()> {
    if theta.size() != x.size() {
        return Err(EnkiError::DimensionMismatch {
            context: "prior ensemble member counts",
            expected: theta.size(),
            got: x.size(),
        });
    }
    if x.dim() != obs.d_x() {
        return Err(EnkiError::DimensionMismatch {
            context: "state dimension vs observation operator",
            expected: obs.d_x(),
            got: x.dim(),
        });
    }
    Ok(())
}

/// Gains from precomputed moments.
pub fn gains_from_moments(moments: &PriorMoments, obs: &ObservationSpec) -> Result<KalmanGains> {
    let h = &obs.h;
    let d_theta = moments.c_theta_x.nrows();
    let d_x = moments.c_x_x.nrows();
    let s = moments.c_hx_hx(h) + &obs.gamma;
    // Stack H C_x,theta and H C_xx so both gains share one solve.
    let h_cxt = h * moments.c_theta_x.transpose();
    let h_cxx = h * &moments.c_x_x;
    let mut rhs = DMatrix::zeros(obs.d_y(), d_theta + d_x);
    rhs.columns_mut(0, d_theta).copy_from(&h_cxt);
    rhs.columns_mut(d_theta, d_x).copy_from(&h_cxx);
    let sol = spd_solve(&s, &rhs)?;
    Ok(KalmanGains {
        k: sol.columns(0, d_theta).transpose(),
        k_prime: sol.columns(d_theta, d_x).transpose(),
    })
}

/// `K = C_theta_x H^T (H C_xx H^T + Gamma)^-1` and `K' = C_xx H^T (...)^-1`
/// under the `1/J` covariance divisor.
pub fn compute_gains(
    theta_prior: &Ensemble,
    x_prior: &Ensemble,
    obs: &ObservationSpec,
) -> Result<KalmanGains> {
    compute_gains_with(theta_prior, x_prior, obs, Divisor::PopulationJ)
}

pub fn compute_gains_with(
    theta_prior: &Ensemble,
    x_prior: &Ensemble,
    obs: &ObservationSpec,
    divisor: Divisor,
) -> Result<KalmanGains> {
    check_prior(theta_prior, x_prior, obs)?;
    gains_from_moments(&PriorMoments::new(theta_prior, x_prior, divisor)?, obs)
}

/// Member-wise update `theta_j + K (y_j - H x_j)`, `x_j + K' (y_j - H x_j)` with
/// given gains.
pub fn apply_update(
    theta_prior: &Ensemble,
    x_prior: &Ensemble,
    obs_draws: &Ensemble,
    obs: &ObservationSpec,
    gains: &KalmanGains,
) -> Result<(Ensemble, Ensemble)> {
    check_prior(theta_prior, x_prior, obs)?;
    if obs_draws.size() != theta_prior.size() {
        return Err(EnkiError::DimensionMismatch {
            context: "observation draws member count",
            expected: theta_prior.size(),
            got: obs_draws.size(),
        });
    }
    if obs_draws.dim() != obs.d_y() {
        return Err(EnkiError::DimensionMismatch {
            context: "observation draws dimension",
            expected: obs.d_y(),
            got: obs_draws.dim(),
        });
    }
    if gains.k.shape() != (theta_prior.dim(), obs.d_y()) {
        return Err(EnkiError::DimensionMismatch {
            context: "parameter gain rows",
            expected: theta_prior.dim(),
            got: gains.k.nrows(),
        });
    }
    // Rows: y_j - H x_j.
    let innov = obs_draws.matrix() - x_prior.matrix() * obs.h.transpose();
    let theta = theta_prior.matrix() + &innov * gains.k.transpose();
    let x = x_prior.matrix() + &innov * gains.k_prime.transpose();
    Ok((Ensemble::new(theta)?, Ensemble::new(x)?))
}

/// Computes the gains from the priors and applies the update stage.
pub fn update_stage(
    theta_prior: &Ensemble,
    x_prior: &Ensemble,
    obs_draws: &Ensemble,
    obs: &ObservationSpec,
) -> Result<(Ensemble, Ensemble)> {
    let gains = compute_gains(theta_prior, x_prior, obs)?;
    apply_update(theta_prior, x_prior, obs_draws, obs, &gains)
}

/// Evaluates the model on every member, failing on non-finite output.
pub fn evaluate_members(theta: &Ensemble, model: &dyn ForwardModel) -> Result<Ensemble> {
    if theta.dim() != model.d_theta() {
        return Err(EnkiError::DimensionMismatch {
            context: "parameter dimension vs model",
            expected: model.d_theta(),
            got: theta.dim(),
        });
    }
    let mut x = DMatrix::zeros(theta.size(), model.d_x());
    for j in 0..theta.size() {
        let xj = model.eval(&theta.member(j));
        if xj.len() != model.d_x() {
            return Err(EnkiError::ModelEvaluation {
                member: j,
                reason: format!("returned {} values, expected {}", xj.len(), model.d_x()),
            });
        }
        if !xj.iter().all(|v| v.is_finite()) {
            return Err(EnkiError::ModelEvaluation {
                member: j,
                reason: "non-finite output".into(),
            });
        }
        x.set_row(j, &xj.transpose());
    }
    Ensemble::new(x)
}

/// Next prior: `theta_hat_{t+1} = theta_t`, `x_hat_{t+1} = f(theta_t)`.
pub fn prediction_stage(
    theta_post: &Ensemble,
    model: &dyn ForwardModel,
    t: usize,
) -> Result<IterationState> {
    Ok(IterationState {
        x_prior: evaluate_members(theta_post, model)?,
        theta_prior: theta_post.clone(),
        t: t + 1,
    })
}

/// Squared innovation `||y_bar - H f(theta_mean)||^2`.
pub fn innovation_norm(
    theta_mean: &DVector<f64>,
    model: &dyn ForwardModel,
    obs: &ObservationSpec,
) -> f64 {
    (&obs.y_bar - &obs.h * model.eval(theta_mean)).norm_squared()
}
