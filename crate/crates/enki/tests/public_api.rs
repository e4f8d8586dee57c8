use std::sync::Arc;

use enki::problems::{linear_problem, ClosureModel};
use enki::resampling::{BaseDistribution, ResamplingPolicy};
use enki::{run, EnkiError, ObservationSpec, ProblemInstance, SolverConfig, SolverStatus};
use nalgebra::{DMatrix, DVector};

fn consistent_linear() -> (ProblemInstance, DVector<f64>) {
    let f = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    let h = DMatrix::identity(3, 3);
    let truth = DVector::from_vec(vec![0.7, -0.4]);
    let y = &h * &f * &truth;
    let obs = ObservationSpec::with_scalar_noise(h, y, 1e-2).unwrap();
    let p = linear_problem(f, obs, DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
    (p, truth)
}

#[test]
fn linear_problem_converges_to_consistent_solution() {
    let (problem, truth) = consistent_linear();
    let config = SolverConfig {
        resampling: ResamplingPolicy::every_iteration(BaseDistribution::Gaussian),
        ..SolverConfig::default()
    };
    let r = run(&problem, &config).unwrap();
    assert_eq!(r.status, SolverStatus::ConvergedInnovation);
    assert!(r.final_innovation < config.tol);
    assert!((&r.theta_hat - &truth).norm() < 0.05, "{}", r.theta_hat);
    assert_eq!(r.trace.len(), r.iterations);
    assert!(r.trace.iter().all(|rec| rec.is_finite()));
}

#[test]
fn closure_model_runs_through_solver() {
    let model = ClosureModel::new(1, 1, |t| t.map(|v| v.powi(3)));
    let obs = ObservationSpec::with_scalar_noise(
        DMatrix::identity(1, 1),
        DVector::from_element(1, 8.0),
        1e-2,
    )
    .unwrap();
    let problem = ProblemInstance::new(
        "cubic",
        Arc::new(model),
        obs,
        DVector::from_element(1, 1.5),
        DMatrix::from_element(1, 1, 0.1),
    )
    .unwrap();
    let r = run(&problem, &SolverConfig::default()).unwrap();
    assert_eq!(r.status, SolverStatus::ConvergedInnovation);
    assert!((r.theta_hat[0] - 2.0).abs() < 0.01, "{}", r.theta_hat);
}

#[test]
fn non_finite_model_output_is_reported() {
    // Finite near the start, undefined once the update pushes members below zero.
    let model = ClosureModel::new(1, 1, |t| t.map(f64::sqrt));
    let obs = ObservationSpec::with_scalar_noise(
        DMatrix::identity(1, 1),
        DVector::from_element(1, -5.0),
        1e-2,
    )
    .unwrap();
    let problem = ProblemInstance::new(
        "sqrt",
        Arc::new(model),
        obs,
        DVector::from_element(1, 1.0),
        DMatrix::from_element(1, 1, 0.01),
    )
    .unwrap();
    let err = run(&problem, &SolverConfig::default()).unwrap_err();
    let text = err.to_string();
    assert!(matches!(err, EnkiError::AtIteration { .. }), "{text}");
    assert!(text.contains("iteration"), "{text}");
}

#[test]
fn same_seed_same_trace() {
    let (problem, _) = consistent_linear();
    let config = SolverConfig {
        seed: 11,
        max_iter: 50,
        resampling: ResamplingPolicy::every_iteration(BaseDistribution::Laplace),
        ..SolverConfig::default()
    };
    assert_eq!(
        run(&problem, &config).unwrap(),
        run(&problem, &config).unwrap()
    );
}

#[test]
fn invalid_configs_are_rejected_before_running() {
    let (problem, _) = consistent_linear();
    let bad = [
        SolverConfig {
            ensemble_size: 1,
            ..SolverConfig::default()
        },
        SolverConfig {
            tol: 0.0,
            ..SolverConfig::default()
        },
        SolverConfig {
            update_only: true,
            resampling: ResamplingPolicy::every_iteration(BaseDistribution::Uniform),
            ..SolverConfig::default()
        },
    ];
    for c in bad {
        assert!(
            matches!(run(&problem, &c), Err(EnkiError::InvalidConfig(_))),
            "{c:?}"
        );
    }
}
