//! CSV and JSON artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use enki::diagnostics::{IterationRecord, SteadyStateReport};
use enki::SolverResult;
use serde_json::{json, Value};

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn trace_header(d_theta: usize, d_x: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "t",
        "norm_C_theta_theta",
        "norm_C_theta_Hx",
        "norm_C_Hx_Hx",
        "norm_K",
        "innovation",
        "gain_delta_after_resample",
        "sigma_sq",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((0..d_theta).map(|i| format!("theta_mean_{i}")));
    h.extend((0..d_x).map(|i| format!("x_prior_mean_{i}")));
    h.extend((0..d_x).map(|i| format!("x_post_mean_{i}")));
    h
}

fn trace_row(r: &IterationRecord) -> Vec<String> {
    let mut row = vec![r.t.to_string()];
    row.extend(
        [
            r.norm_c_theta_theta,
            r.norm_c_theta_hx,
            r.norm_c_hx_hx,
            r.norm_k,
            r.innovation,
            r.gain_delta_after_resample,
            r.sigma_sq,
        ]
        .iter()
        .chain(r.theta_mean.iter())
        .chain(r.x_prior_mean.iter())
        .chain(r.x_post_mean.iter())
        .map(|&v| fmt_f64(v)),
    );
    row
}

pub fn write_trace(
    path: &Path,
    trace: &[IterationRecord],
    d_theta: usize,
    d_x: usize,
) -> Result<(), String> {
    let err = |e: csv::Error| format!("writing {}: {e}", path.display());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(trace_header(d_theta, d_x)).map_err(err)?;
    for r in trace {
        w.write_record(trace_row(r)).map_err(err)?;
    }
    w.flush()
        .map_err(|e| format!("writing {}: {e}", path.display()))
}

pub fn steady_state_json(s: &SteadyStateReport) -> Value {
    json!({
        "oscillation_norm": s.oscillation.norm(),
        "prior_error_norm": s.prior_error.norm(),
        "post_error_norm": s.post_error.norm(),
        "identity_residual": s.identity_residual,
    })
}

pub fn summary_json(r: &SolverResult) -> Value {
    json!({
        "status": r.status.name(),
        "iterations": r.iterations,
        "theta_hat": r.theta_hat.iter().collect::<Vec<_>>(),
        "final_innovation": r.final_innovation,
        "steady_state": r.steady_state.as_ref().map(steady_state_json),
    })
}

/// Fails if any number in the document is not finite.
pub fn check_finite(v: &Value) -> Result<(), String> {
    match v {
        Value::Number(n) if n.as_f64().is_some_and(|f| !f.is_finite()) => {
            Err("non-finite number in output".into())
        }
        // serde_json turns NaN and infinities into null; callers only pass
        // documents whose nulls are structural.
        Value::Array(a) => a.iter().try_for_each(check_finite),
        Value::Object(o) => o.values().try_for_each(check_finite),
        _ => Ok(()),
    }
}

pub fn write_json(path: &Path, v: &Value) -> Result<(), String> {
    let err = |e: std::io::Error| format!("writing {}: {e}", path.display());
    let mut w = BufWriter::new(File::create(path).map_err(err)?);
    serde_json::to_writer_pretty(&mut w, v)
        .map_err(|e| format!("writing {}: {e}", path.display()))?;
    w.write_all(b"\n").map_err(err)?;
    w.flush().map_err(err)
}
