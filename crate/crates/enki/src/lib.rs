//! Iterative ensemble Kalman filtering for nonlinear inverse problems.
//!
//! The solver alternates an ensemble Kalman update of the parameters with a
//! forward-model prediction until the squared innovation falls below a
//! tolerance. Optionally the posterior parameter ensemble is redrawn each
//! iteration from a uniform, Gaussian or Laplace base distribution whose
//! sample mean and covariance are matched exactly to the original.
//!
//! ```
//! use enki::{problems::gaussian_bumps_problem, resampling::*, solver::*};
//!
//! let problem = gaussian_bumps_problem();
//! let config = SolverConfig {
//!     max_iter: 20,
//!     resampling: ResamplingPolicy::every_iteration(BaseDistribution::Gaussian),
//!     ..SolverConfig::default()
//! };
//! let result = run(&problem, &config).unwrap();
//! assert_eq!(result.trace.len(), result.iterations);
//! ```

pub mod diagnostics;
pub mod ensemble;
pub mod error;
pub mod kalman;
pub mod linalg;
pub mod observation;
pub mod problems;
pub mod resampling;
pub mod solver;

pub use ensemble::{cross_covariance, ensemble_mean, CovMatrix, Divisor, Ensemble};
pub use error::{EnkiError, Result};
pub use observation::ObservationSpec;
pub use problems::{ForwardModel, ProblemInstance};
pub use solver::{run, SolverConfig, SolverResult, SolverStatus};
