//! The iteration driver.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::diagnostics::{
    record_iteration, resample_check, steady_state_check, BoxRegion, IterationRecord,
    SteadyStateReport,
};
use crate::ensemble::{Divisor, Ensemble};
use crate::error::{EnkiError, Result};
use crate::kalman::{
    apply_update, evaluate_members, gains_from_moments, perturb_observations, prediction_stage,
    unperturbed_observations, IterationState, PriorMoments,
};
use crate::linalg::{principal_sqrt, DEFAULT_RANK_TOL};
use crate::problems::ProblemInstance;
use crate::resampling::{moment_matched_resample, ResamplingPolicy};

/// Consecutive small steps required by [`detect_fixed_point`].
pub const FIXED_POINT_WINDOW: usize = 10;
/// Step size below which the posterior mean counts as unchanged.
pub const FIXED_POINT_STEP: f64 = 1e-10;

const STREAM_INIT: u64 = 0;
const STREAM_OBSERVATIONS: u64 = 1;
const STREAM_RESAMPLING: u64 = 2;

/// How the observation ensemble is produced each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PerturbationMode {
    /// Fresh draws every iteration.
    #[default]
    Fresh,
    /// Draws from the first iteration are reused.
    Fixed,
    /// Every member equals `y_bar`.
    None,
}

impl PerturbationMode {
    pub fn name(self) -> &'static str {
        match self {
            PerturbationMode::Fresh => "fresh",
            PerturbationMode::Fixed => "fixed",
            PerturbationMode::None => "none",
        }
    }
}

impl fmt::Display for PerturbationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbationMode {
    type Err = EnkiError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fresh" => Ok(Self::Fresh),
            "fixed" => Ok(Self::Fixed),
            "none" => Ok(Self::None),
            other => Err(EnkiError::InvalidConfig(format!(
                "unknown perturbation mode `{other}` (expected fresh, fixed or none)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub ensemble_size: usize,
    /// Threshold on the squared innovation.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub resampling: ResamplingPolicy,
    pub perturbations: PerturbationMode,
    /// Skip the prediction stage: the posterior pair becomes the next prior.
    pub update_only: bool,
    pub covariance_divisor: Divisor,
    pub stagnation_window: usize,
    pub stagnation_gain_eps: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 100,
            tol: 1e-4,
            max_iter: 5000,
            seed: 0,
            resampling: ResamplingPolicy::off(),
            perturbations: PerturbationMode::Fresh,
            update_only: false,
            covariance_divisor: Divisor::PopulationJ,
            stagnation_window: 50,
            stagnation_gain_eps: 1e-6,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(EnkiError::InvalidConfig(msg));
        if self.ensemble_size < 2 {
            return bad(format!(
                "ensemble_size must be >= 2, got {}",
                self.ensemble_size
            ));
        }
        if self.max_iter < 1 {
            return bad("max_iter must be >= 1".into());
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if self.stagnation_window < 2 {
            return bad(format!(
                "stagnation_window must be >= 2, got {}",
                self.stagnation_window
            ));
        }
        if self.stagnation_gain_eps.is_nan() || self.stagnation_gain_eps < 0.0 {
            return bad("stagnation_gain_eps must be non-negative".into());
        }
        if !(self.resampling.rank_tol >= 0.0 && self.resampling.rank_tol < 1.0) {
            return bad("rank_tol must lie in [0, 1)".into());
        }
        if self.update_only && self.resampling.is_on() {
            return bad("update_only cannot be combined with resampling".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverStatus {
    ConvergedInnovation,
    EarlyStopped,
    MaxIterations,
}

impl SolverStatus {
    pub fn name(self) -> &'static str {
        match self {
            SolverStatus::ConvergedInnovation => "converged_innovation",
            SolverStatus::EarlyStopped => "early_stopped",
            SolverStatus::MaxIterations => "max_iterations",
        }
    }
}

impl fmt::Display for SolverStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverResult {
    /// Final posterior parameter mean.
    pub theta_hat: DVector<f64>,
    pub status: SolverStatus,
    pub iterations: usize,
    pub final_innovation: f64,
    pub trace: Vec<IterationRecord>,
    pub fixed_point: Option<usize>,
    /// Steady-state check at the detected fixed point.
    pub steady_state: Option<SteadyStateReport>,
    /// Bounding box of every parameter member the run produced.
    pub visited: BoxRegion,
}

impl SolverResult {
    /// Steady-state check at iteration `t` of the trace.
    pub fn steady_state_at(
        &self,
        t: usize,
        problem: &ProblemInstance,
    ) -> Option<Result<SteadyStateReport>> {
        let r = self.trace.iter().find(|r| r.t == t)?;
        Some(steady_state_check(
            &r.x_prior_mean,
            &r.x_post_mean,
            &r.c_x_x,
            &problem.obs,
        ))
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws the initial ensemble from `N(init_mean, init_cov)` and evaluates the model.
pub fn initialize<R: Rng + ?Sized>(
    problem: &ProblemInstance,
    config: &SolverConfig,
    rng: &mut R,
) -> Result<IterationState> {
    config.validate()?;
    let (j, d) = (config.ensemble_size, problem.d_theta());
    let (s, _) = principal_sqrt(&problem.init_cov, DEFAULT_RANK_TOL)?;
    let xi = DMatrix::<f64>::from_fn(j, d, |_, _| rng.sample(StandardNormal));
    let dev = xi * s.transpose();
    let theta = Ensemble::new(DMatrix::from_fn(j, d, |r, i| {
        problem.init_mean[i] + dev[(r, i)]
    }))?;
    Ok(IterationState {
        x_prior: evaluate_members(&theta, problem.model.as_ref())?,
        theta_prior: theta,
        t: 1,
    })
}

/// Runs update, optional resampling and prediction until the squared
/// innovation drops below `tol`, the gain stagnates, or `max_iter` is reached.
pub fn run(problem: &ProblemInstance, config: &SolverConfig) -> Result<SolverResult> {
    config.validate()?;
    let obs = &problem.obs;
    let j = config.ensemble_size;

    let mut init_rng = rng_for(config.seed, STREAM_INIT);
    let mut obs_rng = rng_for(config.seed, STREAM_OBSERVATIONS);
    let mut res_rng = rng_for(config.seed, STREAM_RESAMPLING);

    let mut state = initialize(problem, config, &mut init_rng)?;
    let mut visited = BoxRegion::hull(state.theta_prior.matrix(), 0.0);
    let fixed_draws = match config.perturbations {
        PerturbationMode::Fixed => Some(perturb_observations(obs, j, &mut obs_rng)?),
        PerturbationMode::None => Some(unperturbed_observations(obs, j)?),
        PerturbationMode::Fresh => None,
    };

    let mut trace: Vec<IterationRecord> = Vec::new();
    let mut stagnant = 0usize;
    let status = loop {
        let t = state.t;
        let (record, theta_post, next) = step_once(
            problem,
            config,
            &state,
            fixed_draws.as_ref(),
            &mut obs_rng,
            &mut res_rng,
        )
        .map_err(|e| e.at(t))?;
        if !record.is_finite() {
            return Err(EnkiError::NonFinite {
                what: "iteration record",
            }
            .at(t));
        }
        visited = visited
            .union(&BoxRegion::hull(theta_post.matrix(), 0.0))
            .union(&BoxRegion::hull(next.theta_prior.matrix(), 0.0));
        let innovation = record.innovation;
        let norm_k = record.norm_k;
        trace.push(record);
        state = next;

        if innovation < config.tol {
            break SolverStatus::ConvergedInnovation;
        }
        if norm_k < config.stagnation_gain_eps {
            stagnant += 1;
        } else {
            stagnant = 0;
        }
        if stagnant >= config.stagnation_window {
            break SolverStatus::EarlyStopped;
        }
        if t >= config.max_iter {
            break SolverStatus::MaxIterations;
        }
    };

    let last = trace.last().expect("at least one iteration");
    let fixed_point = detect_fixed_point(&trace);
    let steady_state = match fixed_point {
        Some(tf) => {
            let r = trace
                .iter()
                .find(|r| r.t == tf)
                .expect("fixed point is in trace");
            Some(steady_state_check(
                &r.x_prior_mean,
                &r.x_post_mean,
                &r.c_x_x,
                obs,
            )?)
        }
        None => None,
    };
    Ok(SolverResult {
        theta_hat: last.theta_mean.clone(),
        status,
        iterations: last.t,
        final_innovation: last.innovation,
        fixed_point,
        steady_state,
        trace,
        visited,
    })
}

fn step_once(
    problem: &ProblemInstance,
    config: &SolverConfig,
    state: &IterationState,
    fixed_draws: Option<&Ensemble>,
    obs_rng: &mut ChaCha20Rng,
    res_rng: &mut ChaCha20Rng,
) -> Result<(IterationRecord, Ensemble, IterationState)> {
    let model = problem.model.as_ref();
    let obs = &problem.obs;
    let divisor = config.covariance_divisor;

    let draws = match fixed_draws {
        Some(d) => d.clone(),
        None => perturb_observations(obs, config.ensemble_size, obs_rng)?,
    };
    let moments = PriorMoments::new(&state.theta_prior, &state.x_prior, divisor)?;
    let gains = gains_from_moments(&moments, obs)?;
    let (theta_post, x_post) =
        apply_update(&state.theta_prior, &state.x_prior, &draws, obs, &gains)?;

    let (next, check) = if config.update_only {
        let next = IterationState {
            theta_prior: theta_post.clone(),
            x_prior: x_post.clone(),
            t: state.t + 1,
        };
        (next, None)
    } else if config.resampling.is_on() {
        let x_before = evaluate_members(&theta_post, model)?;
        let (theta_r, report) = moment_matched_resample(&theta_post, &config.resampling, res_rng)?;
        let next = prediction_stage(&theta_r, model, state.t)?;
        let check = resample_check(
            &theta_post,
            &x_before,
            &next.theta_prior,
            &next.x_prior,
            obs,
            report,
            divisor,
        )?;
        (next, Some(check))
    } else {
        (prediction_stage(&theta_post, model, state.t)?, None)
    };

    let record = record_iteration(
        state,
        &gains,
        (&theta_post, &x_post),
        obs,
        model,
        check,
        divisor,
    )?;
    Ok((record, theta_post, next))
}

/// Smallest `t` in the trace after which the posterior mean moves less than
/// `1e-10` for ten consecutive iterations.
pub fn detect_fixed_point(trace: &[IterationRecord]) -> Option<usize> {
    let n = trace.len();
    if n < FIXED_POINT_WINDOW + 1 {
        return None;
    }
    let small: Vec<bool> = trace
        .windows(2)
        .map(|w| (&w[1].theta_mean - &w[0].theta_mean).norm() < FIXED_POINT_STEP)
        .collect();
    // small[i] is the step from trace[i] to trace[i + 1].
    let mut run = 0usize;
    for (i, &s) in small.iter().enumerate() {
        run = if s { run + 1 } else { 0 };
        if run == FIXED_POINT_WINDOW {
            return Some(trace[i + 1 - FIXED_POINT_WINDOW].t);
        }
    }
    None
}
