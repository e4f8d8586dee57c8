use std::fs;
use std::path::Path;
use std::time::Instant;

use enki::{run, ProblemInstance, SolverConfig, SolverResult, SolverStatus};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Config, ResamplingChoice};
use crate::output::{check_finite, fmt_f64, summary_json, write_json, write_trace};

pub const SEED_ENV: &str = "ENKI_SEED";

/// Reads the master seed override from the environment, if set.
pub fn seed_override() -> Result<Option<u64>, String> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|e| format!("{SEED_ENV}={s:?}: {e}")),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(format!("{SEED_ENV}: {e}")),
    }
}

fn prepare_out(out: &Path) -> Result<(), String> {
    fs::create_dir_all(out).map_err(|e| format!("cannot create {}: {e}", out.display()))
}

fn manifest(config: &Config, command: &str, artifacts: &[&str], started: Instant) -> Value {
    json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "problem_id": config.problem.id(),
        "master_seed": config.solver.seed,
        "config": config,
        "artifacts": artifacts,
        "wall_clock_seconds": started.elapsed().as_secs_f64(),
    })
}

fn solve(problem: &ProblemInstance, cfg: &SolverConfig) -> Result<SolverResult, String> {
    run(problem, cfg).map_err(|e| format!("seed {}: {e}", cfg.seed))
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool, String> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| format!("thread pool: {e}"))
}

/// Single run. Returns the solver status for the exit code.
pub fn run_single(config: &Config, out: &Path) -> Result<SolverStatus, String> {
    let started = Instant::now();
    let problem = config.problem.build()?;
    let cfg = config.solver.to_solver_config();
    let result = solve(&problem, &cfg)?;
    prepare_out(out)?;
    write_trace(
        &out.join("trace.csv"),
        &result.trace,
        problem.model.d_theta(),
        problem.model.d_x(),
    )?;
    let summary = summary_json(&result);
    check_finite(&summary)?;
    write_json(&out.join("summary.json"), &summary)?;
    write_json(
        &out.join("manifest.json"),
        &manifest(
            config,
            "run",
            &["trace.csv", "summary.json", "manifest.json"],
            started,
        ),
    )?;
    Ok(result.status)
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub distribution: &'static str,
    pub seed: u64,
    pub status: &'static str,
    pub iterations: usize,
    pub final_innovation: f64,
}

fn median(v: &mut [usize]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_unstable();
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    })
}

/// Runs every resampling choice over `seeds` consecutive seeds.
pub fn compare_distributions(
    config: &Config,
    seeds: u64,
    jobs: Option<usize>,
    out: &Path,
) -> Result<(), String> {
    let started = Instant::now();
    let problem = config.problem.build()?;
    let base = config.solver.seed;
    let tasks: Vec<(ResamplingChoice, u64)> = ResamplingChoice::ALL
        .iter()
        .flat_map(|&c| (0..seeds).map(move |i| (c, base + i)))
        .collect();
    let rows: Vec<CompareRow> = pool(jobs)?.install(|| {
        tasks
            .par_iter()
            .map(|&(choice, seed)| {
                let mut section = config.solver.clone();
                section.resampling = choice;
                section.seed = seed;
                let r = solve(&problem, &section.to_solver_config())
                    .map_err(|e| format!("{}: {e}", choice.name()))?;
                Ok(CompareRow {
                    distribution: choice.name(),
                    seed,
                    status: r.status.name(),
                    iterations: r.iterations,
                    final_innovation: r.final_innovation,
                })
            })
            .collect::<Result<Vec<_>, String>>()
    })?;

    prepare_out(out)?;
    let path = out.join("compare.csv");
    let err = |e: csv::Error| format!("writing {}: {e}", path.display());
    let mut w = csv::Writer::from_path(&path).map_err(err)?;
    w.write_record([
        "distribution",
        "seed",
        "status",
        "iterations",
        "final_innovation",
    ])
    .map_err(err)?;
    for r in &rows {
        w.write_record([
            r.distribution.to_string(),
            r.seed.to_string(),
            r.status.to_string(),
            r.iterations.to_string(),
            fmt_f64(r.final_innovation),
        ])
        .map_err(err)?;
    }
    w.flush()
        .map_err(|e| format!("writing {}: {e}", path.display()))?;

    let per: Vec<Value> = ResamplingChoice::ALL
        .iter()
        .map(|c| {
            let mine: Vec<&CompareRow> =
                rows.iter().filter(|r| r.distribution == c.name()).collect();
            let mut its: Vec<usize> = mine.iter().map(|r| r.iterations).collect();
            let converged = mine
                .iter()
                .filter(|r| r.status == SolverStatus::ConvergedInnovation.name())
                .count();
            json!({
                "distribution": c.name(),
                "runs": mine.len(),
                "converged": converged,
                "median_iterations": median(&mut its),
            })
        })
        .collect();
    write_json(
        &out.join("compare_summary.json"),
        &json!({ "seeds": seeds, "distributions": per }),
    )?;
    write_json(
        &out.join("manifest.json"),
        &manifest(
            config,
            "compare-distributions",
            &["compare.csv", "compare_summary.json", "manifest.json"],
            started,
        ),
    )
}

/// Runs each observation noise level with resampling off over `seeds` seeds.
pub fn sweep_gamma(
    config: &Config,
    gammas: &[f64],
    seeds: u64,
    jobs: Option<usize>,
    out: &Path,
) -> Result<(), String> {
    let started = Instant::now();
    let base_problem = config.problem.build()?;
    let problems = gammas
        .iter()
        .map(|&g| {
            base_problem
                .clone()
                .with_scalar_noise(g)
                .map_err(|e| format!("gamma {g}: {e}"))
        })
        .collect::<Result<Vec<_>, String>>()?;
    let tasks: Vec<(usize, u64)> = (0..gammas.len())
        .flat_map(|g| (0..seeds).map(move |i| (g, config.solver.seed + i)))
        .collect();
    let rows: Vec<Vec<String>> = pool(jobs)?.install(|| {
        tasks
            .par_iter()
            .map(|&(gi, seed)| {
                let mut section = config.solver.clone();
                section.resampling = ResamplingChoice::Off;
                section.seed = seed;
                let problem = &problems[gi];
                let r = solve(problem, &section.to_solver_config())
                    .map_err(|e| format!("gamma {}: {e}", gammas[gi]))?;
                let t = r.fixed_point.unwrap_or(r.iterations);
                let ss = match &r.steady_state {
                    Some(s) => Some(s.clone()),
                    None => r.steady_state_at(t, problem).and_then(|s| s.ok()),
                };
                let cell = |f: &dyn Fn(&enki::diagnostics::SteadyStateReport) -> f64| {
                    ss.as_ref().map(|s| fmt_f64(f(s))).unwrap_or_default()
                };
                Ok(vec![
                    fmt_f64(gammas[gi]),
                    seed.to_string(),
                    r.status.name().to_string(),
                    r.iterations.to_string(),
                    r.fixed_point.map(|t| t.to_string()).unwrap_or_default(),
                    cell(&|s| s.oscillation.norm()),
                    cell(&|s| s.post_error.norm()),
                    cell(&|s| s.identity_residual),
                ])
            })
            .collect::<Result<Vec<_>, String>>()
    })?;

    prepare_out(out)?;
    let path = out.join("gamma_sweep.csv");
    let err = |e: csv::Error| format!("writing {}: {e}", path.display());
    let mut w = csv::Writer::from_path(&path).map_err(err)?;
    w.write_record([
        "gamma",
        "seed",
        "status",
        "iterations",
        "fixed_point_t",
        "oscillation_norm",
        "post_error_norm",
        "identity_residual",
    ])
    .map_err(err)?;
    for r in &rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush()
        .map_err(|e| format!("writing {}: {e}", path.display()))?;
    write_json(
        &out.join("manifest.json"),
        &manifest(
            config,
            "sweep-gamma",
            &["gamma_sweep.csv", "manifest.json"],
            started,
        ),
    )
}
