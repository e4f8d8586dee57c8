//! JSON experiment configuration.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use enki::problems::{
    gaussian_bumps_problem, linear_problem, GaussianBumps, BUMPS_GAMMA, BUMPS_H, BUMPS_INIT_MEAN,
    BUMPS_INIT_VARIANCE, BUMPS_Y_BAR,
};
use enki::resampling::{BaseDistribution, ResamplingMode, ResamplingPolicy};
use enki::solver::{PerturbationMode, SolverConfig};
use enki::{Divisor, ObservationSpec, ProblemInstance};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub solver: SolverSection,
}

/// A scalar (times identity) or a full matrix given as rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

impl MatrixSpec {
    fn to_matrix(&self, n: usize, field: &str) -> Result<DMatrix<f64>, String> {
        match self {
            MatrixSpec::Scalar(a) => Ok(DMatrix::identity(n, n) * *a),
            MatrixSpec::Rows(rows) => {
                let m = rows_to_matrix(rows, field)?;
                if m.shape() != (n, n) {
                    return Err(format!("{field}: expected a {n}x{n} matrix"));
                }
                Ok(m)
            }
        }
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], field: &str) -> Result<DMatrix<f64>, String> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(format!("{field}: matrix must be non-empty"));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(format!("{field}: rows have different lengths"));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case")]
pub enum ProblemConfig {
    GaussianBumps(BumpsConfig),
    Linear(LinearConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpsConfig {
    #[serde(default = "default_bumps_gamma")]
    pub gamma: f64,
    #[serde(default = "default_bumps_y_bar")]
    pub y_bar: f64,
    #[serde(default = "default_bumps_init_mean")]
    pub init_mean: Vec<f64>,
    #[serde(default = "default_bumps_init_cov")]
    pub init_cov: MatrixSpec,
}

fn default_bumps_gamma() -> f64 {
    BUMPS_GAMMA
}

fn default_bumps_y_bar() -> f64 {
    BUMPS_Y_BAR
}

fn default_bumps_init_mean() -> Vec<f64> {
    BUMPS_INIT_MEAN.to_vec()
}

fn default_bumps_init_cov() -> MatrixSpec {
    MatrixSpec::Scalar(BUMPS_INIT_VARIANCE)
}

impl Default for BumpsConfig {
    fn default() -> Self {
        Self {
            gamma: BUMPS_GAMMA,
            y_bar: BUMPS_Y_BAR,
            init_mean: default_bumps_init_mean(),
            init_cov: default_bumps_init_cov(),
        }
    }
}

/// `x = F theta`, observed through `H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearConfig {
    pub forward: Vec<Vec<f64>>,
    pub observation: Vec<Vec<f64>>,
    pub y_bar: Vec<f64>,
    pub gamma: MatrixSpec,
    pub init_mean: Vec<f64>,
    pub init_cov: MatrixSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResamplingChoice {
    Off,
    Uniform,
    Gaussian,
    Laplace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationChoice {
    Fresh,
    Fixed,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivisorChoice {
    Population,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub ensemble_size: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub resampling: ResamplingChoice,
    pub rank_tol: f64,
    pub perturbations: PerturbationChoice,
    pub update_only: bool,
    pub covariance_divisor: DivisorChoice,
    pub stagnation_window: usize,
    pub stagnation_gain_eps: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = SolverConfig::default();
        Self {
            ensemble_size: d.ensemble_size,
            tol: d.tol,
            max_iter: d.max_iter,
            seed: d.seed,
            resampling: ResamplingChoice::Off,
            rank_tol: d.resampling.rank_tol,
            perturbations: PerturbationChoice::Fresh,
            update_only: d.update_only,
            covariance_divisor: DivisorChoice::Population,
            stagnation_window: d.stagnation_window,
            stagnation_gain_eps: d.stagnation_gain_eps,
        }
    }
}

impl ResamplingChoice {
    pub const ALL: [ResamplingChoice; 4] = [
        ResamplingChoice::Off,
        ResamplingChoice::Uniform,
        ResamplingChoice::Gaussian,
        ResamplingChoice::Laplace,
    ];

    pub fn policy(self, rank_tol: f64) -> ResamplingPolicy {
        let base = match self {
            ResamplingChoice::Off => {
                return ResamplingPolicy {
                    rank_tol,
                    ..ResamplingPolicy::off()
                }
            }
            ResamplingChoice::Uniform => BaseDistribution::Uniform,
            ResamplingChoice::Gaussian => BaseDistribution::Gaussian,
            ResamplingChoice::Laplace => BaseDistribution::Laplace,
        };
        ResamplingPolicy {
            mode: ResamplingMode::EveryIteration,
            base,
            rank_tol,
        }
    }

    pub fn name(self) -> &'static str {
        self.policy(0.0).label()
    }
}

impl SolverSection {
    pub fn to_solver_config(&self) -> SolverConfig {
        SolverConfig {
            ensemble_size: self.ensemble_size,
            tol: self.tol,
            max_iter: self.max_iter,
            seed: self.seed,
            resampling: self.resampling.policy(self.rank_tol),
            perturbations: match self.perturbations {
                PerturbationChoice::Fresh => PerturbationMode::Fresh,
                PerturbationChoice::Fixed => PerturbationMode::Fixed,
                PerturbationChoice::None => PerturbationMode::None,
            },
            update_only: self.update_only,
            covariance_divisor: match self.covariance_divisor {
                DivisorChoice::Population => Divisor::PopulationJ,
                DivisorChoice::Sample => Divisor::SampleJminus1,
            },
            stagnation_window: self.stagnation_window,
            stagnation_gain_eps: self.stagnation_gain_eps,
        }
    }
}

impl ProblemConfig {
    pub fn id(&self) -> &'static str {
        match self {
            ProblemConfig::GaussianBumps(_) => "gaussian_bumps",
            ProblemConfig::Linear(_) => "linear",
        }
    }

    pub fn build(&self) -> Result<ProblemInstance, String> {
        let err = |e: enki::EnkiError| format!("problem: {e}");
        match self {
            ProblemConfig::GaussianBumps(c) => {
                if c.init_mean.len() != 2 {
                    return Err("problem.init_mean: expected 2 entries".into());
                }
                let obs = ObservationSpec::with_scalar_noise(
                    DMatrix::from_row_slice(1, 2, &BUMPS_H),
                    DVector::from_element(1, c.y_bar),
                    c.gamma,
                )
                .map_err(|e| format!("problem.gamma: {e}"))?;
                let base = gaussian_bumps_problem();
                ProblemInstance::new(
                    base.id,
                    Arc::new(GaussianBumps),
                    obs,
                    DVector::from_vec(c.init_mean.clone()),
                    c.init_cov.to_matrix(2, "problem.init_cov")?,
                )
                .map_err(err)
            }
            ProblemConfig::Linear(c) => {
                let f = rows_to_matrix(&c.forward, "problem.forward")?;
                let h = rows_to_matrix(&c.observation, "problem.observation")?;
                let dy = h.nrows();
                let gamma = c.gamma.to_matrix(dy, "problem.gamma")?;
                let obs = ObservationSpec::new(h, DVector::from_vec(c.y_bar.clone()), gamma)
                    .map_err(|e| format!("problem.observation: {e}"))?;
                linear_problem(
                    f.clone(),
                    obs,
                    DVector::from_vec(c.init_mean.clone()),
                    c.init_cov.to_matrix(f.ncols(), "problem.init_cov")?,
                )
                .map_err(err)
            }
        }
    }
}

/// Parses a config, reporting the JSON path of the offending field on failure.
pub fn parse_config(text: &str) -> Result<Config, String> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            e.inner().to_string()
        } else {
            format!("{path}: {}", e.inner())
        }
    })?;
    cfg.solver
        .to_solver_config()
        .validate()
        .map_err(|e| format!("solver: {e}"))?;
    cfg.problem.build()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<Config, String> {
    let text =
        fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    parse_config(&text).map_err(|e| format!("{}: {e}", path.display()))
}
