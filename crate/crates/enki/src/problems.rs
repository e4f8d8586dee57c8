//! Forward models and the built-in test problems.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{EnkiError, Result};
use crate::linalg::{asymmetry, retained_spectrum, DEFAULT_RANK_TOL};
use crate::observation::ObservationSpec;

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Default initial ensemble mean for the Gaussian-bumps problem.
pub const BUMPS_INIT_MEAN: [f64; 2] = [2.0, 2.0];
/// Default isotropic initial ensemble variance for the Gaussian-bumps problem.
pub const BUMPS_INIT_VARIANCE: f64 = 0.005;
pub const BUMPS_GAMMA: f64 = 0.01;
pub const BUMPS_Y_BAR: f64 = -1.0;
pub const BUMPS_H: [f64; 2] = [-1.5, -1.0];

/// A deterministic map `theta -> x`.
///
/// Implementations must be pure so that members can be evaluated from several
/// threads and repeated evaluation is bit-identical.
pub trait ForwardModel: Send + Sync {
    fn d_theta(&self) -> usize;
    fn d_x(&self) -> usize;
    fn eval(&self, theta: &DVector<f64>) -> DVector<f64>;

    /// Analytic Jacobian (`d_x x d_theta`), if available.
    fn gradient(&self, _theta: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

/// Analytic Jacobian when the model has one, central differences otherwise.
pub fn model_gradient(model: &dyn ForwardModel, theta: &DVector<f64>) -> DMatrix<f64> {
    model
        .gradient(theta)
        .unwrap_or_else(|| central_differences(model, theta, DEFAULT_FD_STEP))
}

fn central_differences(model: &dyn ForwardModel, theta: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(model.d_x(), model.d_theta());
    for i in 0..model.d_theta() {
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        plus[i] += h;
        minus[i] -= h;
        let col = (model.eval(&plus) - model.eval(&minus)) / (2.0 * h);
        g.set_column(i, &col);
    }
    g
}

/// Central-difference Jacobian `(f(theta + h e_i) - f(theta - h e_i)) / 2h`.
pub fn finite_difference_gradient(
    model: &dyn ForwardModel,
    theta: &DVector<f64>,
    h: f64,
) -> Result<DMatrix<f64>> {
    if h.is_nan() || h <= 0.0 {
        return Err(EnkiError::InvalidConfig(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    if theta.len() != model.d_theta() {
        return Err(EnkiError::DimensionMismatch {
            context: "finite_difference_gradient theta",
            expected: model.d_theta(),
            got: theta.len(),
        });
    }
    Ok(central_differences(model, theta, h))
}

/// Two Gaussian bumps centred at `(-1,-1)` and `(1,1)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct GaussianBumps;

impl ForwardModel for GaussianBumps {
    fn d_theta(&self) -> usize {
        2
    }

    fn d_x(&self) -> usize {
        2
    }

    fn eval(&self, t: &DVector<f64>) -> DVector<f64> {
        let x1 = (-(t[0] + 1.0).powi(2) - (t[1] + 1.0).powi(2)).exp();
        let x2 = (-(t[0] - 1.0).powi(2) - (t[1] - 1.0).powi(2)).exp();
        DVector::from_vec(vec![x1, x2])
    }

    fn gradient(&self, t: &DVector<f64>) -> Option<DMatrix<f64>> {
        let x = self.eval(t);
        Some(DMatrix::from_row_slice(
            2,
            2,
            &[
                -2.0 * (t[0] + 1.0) * x[0],
                -2.0 * (t[1] + 1.0) * x[0],
                -2.0 * (t[0] - 1.0) * x[1],
                -2.0 * (t[1] - 1.0) * x[1],
            ],
        ))
    }
}

pub fn gaussian_bumps_model() -> GaussianBumps {
    GaussianBumps
}

/// `theta -> F theta`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub f: DMatrix<f64>,
}

impl ForwardModel for LinearModel {
    fn d_theta(&self) -> usize {
        self.f.ncols()
    }

    fn d_x(&self) -> usize {
        self.f.nrows()
    }

    fn eval(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.f * theta
    }

    fn gradient(&self, _theta: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.f.clone())
    }
}

pub fn linear_model(f: DMatrix<f64>) -> LinearModel {
    LinearModel { f }
}

type EvalFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
type GradFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// A user-supplied model built from closures.
///
/// ```
/// use enki::problems::{ClosureModel, ForwardModel};
/// use nalgebra::DVector;
///
/// let m = ClosureModel::new(1, 1, |t| t.map(|v| v * v))
///     .with_gradient(|t| nalgebra::DMatrix::from_element(1, 1, 2.0 * t[0]));
/// assert_eq!(m.eval(&DVector::from_element(1, 3.0))[0], 9.0);
/// ```
pub struct ClosureModel {
    d_theta: usize,
    d_x: usize,
    eval: Box<EvalFn>,
    gradient: Option<Box<GradFn>>,
}

impl ClosureModel {
    pub fn new(
        d_theta: usize,
        d_x: usize,
        eval: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            d_theta,
            d_x,
            eval: Box::new(eval),
            gradient: None,
        }
    }

    pub fn with_gradient(
        mut self,
        gradient: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.gradient = Some(Box::new(gradient));
        self
    }
}

impl fmt::Debug for ClosureModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClosureModel")
            .field("d_theta", &self.d_theta)
            .field("d_x", &self.d_x)
            .field("analytic_gradient", &self.gradient.is_some())
            .finish()
    }
}

impl ForwardModel for ClosureModel {
    fn d_theta(&self) -> usize {
        self.d_theta
    }

    fn d_x(&self) -> usize {
        self.d_x
    }

    fn eval(&self, theta: &DVector<f64>) -> DVector<f64> {
        (self.eval)(theta)
    }

    fn gradient(&self, theta: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.gradient.as_ref().map(|g| g(theta))
    }
}

/// A forward model, observations and the initial ensemble distribution.
#[derive(Clone)]
pub struct ProblemInstance {
    pub id: String,
    pub model: Arc<dyn ForwardModel>,
    pub obs: ObservationSpec,
    pub init_mean: DVector<f64>,
    pub init_cov: DMatrix<f64>,
}

impl fmt::Debug for ProblemInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemInstance")
            .field("id", &self.id)
            .field("d_theta", &self.model.d_theta())
            .field("d_x", &self.model.d_x())
            .field("obs", &self.obs)
            .field("init_mean", &self.init_mean)
            .field("init_cov", &self.init_cov)
            .finish()
    }
}

impl ProblemInstance {
    pub fn new(
        id: impl Into<String>,
        model: Arc<dyn ForwardModel>,
        obs: ObservationSpec,
        init_mean: DVector<f64>,
        init_cov: DMatrix<f64>,
    ) -> Result<Self> {
        if obs.d_x() != model.d_x() {
            return Err(EnkiError::DimensionMismatch {
                context: "observation operator columns vs model state dimension",
                expected: model.d_x(),
                got: obs.d_x(),
            });
        }
        if init_mean.len() != model.d_theta() {
            return Err(EnkiError::DimensionMismatch {
                context: "initial mean",
                expected: model.d_theta(),
                got: init_mean.len(),
            });
        }
        if init_cov.nrows() != model.d_theta() || init_cov.ncols() != model.d_theta() {
            return Err(EnkiError::DimensionMismatch {
                context: "initial covariance",
                expected: model.d_theta(),
                got: init_cov.nrows(),
            });
        }
        let asym = asymmetry(&init_cov);
        if asym > 1e-12 {
            return Err(EnkiError::NotSymmetric { asymmetry: asym });
        }
        retained_spectrum(&init_cov, DEFAULT_RANK_TOL)?;
        Ok(Self {
            id: id.into(),
            model,
            obs,
            init_mean,
            init_cov,
        })
    }

    pub fn d_theta(&self) -> usize {
        self.model.d_theta()
    }

    pub fn d_x(&self) -> usize {
        self.model.d_x()
    }

    /// Same problem with a different noise level `Gamma = gamma * I`.
    pub fn with_scalar_noise(&self, gamma: f64) -> Result<Self> {
        let obs =
            ObservationSpec::with_scalar_noise(self.obs.h.clone(), self.obs.y_bar.clone(), gamma)?;
        Ok(Self {
            obs,
            ..self.clone()
        })
    }

    pub fn with_init(&self, init_mean: DVector<f64>, init_cov: DMatrix<f64>) -> Result<Self> {
        Self::new(
            self.id.clone(),
            self.model.clone(),
            self.obs.clone(),
            init_mean,
            init_cov,
        )
    }
}

/// The two-bump problem with `H = [-1.5, -1.0]`, `y_bar = -1`, `Gamma = 0.01`, and
/// the default initial ensemble `N((2,2), 0.005 I)`.
pub fn gaussian_bumps_problem() -> ProblemInstance {
    let obs = ObservationSpec::with_scalar_noise(
        DMatrix::from_row_slice(1, 2, &BUMPS_H),
        DVector::from_element(1, BUMPS_Y_BAR),
        BUMPS_GAMMA,
    )
    .expect("built-in observation spec is valid");
    ProblemInstance::new(
        "gaussian_bumps",
        Arc::new(GaussianBumps),
        obs,
        DVector::from_row_slice(&BUMPS_INIT_MEAN),
        DMatrix::identity(2, 2) * BUMPS_INIT_VARIANCE,
    )
    .expect("built-in problem is valid")
}

/// A linear problem `x = F theta` observed through `obs`.
pub fn linear_problem(
    f: DMatrix<f64>,
    obs: ObservationSpec,
    init_mean: DVector<f64>,
    init_cov: DMatrix<f64>,
) -> Result<ProblemInstance> {
    ProblemInstance::new(
        "linear",
        Arc::new(linear_model(f)),
        obs,
        init_mean,
        init_cov,
    )
}
