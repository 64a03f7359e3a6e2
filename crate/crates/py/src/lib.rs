//! Python bindings: sampling schedules, projection, SI-SDR, selftest and
//! separation with a trained checkpoint. Signals travel as lists of floats.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use flowsep::geometry::{project_perp as perp, Stack};
use flowsep::metrics::best_perm_score;
use flowsep::pipeline::load_model;
use flowsep::sampler::{make_schedule, separate as run_separate, ScheduleKind};

fn to_py(e: flowsep::Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        4 => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn stack(rows: &[Vec<f64>]) -> PyResult<Stack> {
    Stack::from_rows(rows).map_err(to_py)
}

fn rows(s: &Stack) -> Vec<Vec<f64>> {
    s.rows().map(<[f64]>::to_vec).collect()
}

/// Time grid of a schedule name (`linear:N`, `custom5`, `custom5_rev`, `single`).
#[pyfunction]
fn schedule_times(name: &str) -> PyResult<Vec<f64>> {
    let kind: ScheduleKind = name.parse().map_err(to_py)?;
    Ok(make_schedule(kind).map_err(to_py)?.times)
}

/// Removes the mean across sources from every column.
#[pyfunction]
fn project_perp(sources: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&perp(&stack(&sources)?)))
}

/// Best-permutation SI-SDR: `(mean_db, per_source_db, perm)`.
#[pyfunction]
fn si_sdr(estimates: Vec<Vec<f64>>, references: Vec<Vec<f64>>) -> PyResult<(f64, Vec<f64>, Vec<usize>)> {
    let s = best_perm_score(&stack(&estimates)?, &stack(&references)?).map_err(to_py)?;
    Ok((s.mean, s.per_source, s.perm.as_slice().to_vec()))
}

/// Runs the built-in checks: a list of `(name, passed, detail)`.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn selftest(seed: u64) -> Vec<(String, bool, String)> {
    flowsep::cli::run_selftest(seed).into_iter().map(|r| (r.name.to_string(), r.passed, r.detail)).collect()
}

/// Separates `mixture` with the checkpoint at `model`; returns one list per source.
#[pyfunction]
#[pyo3(signature = (model, mixture, sources=2, schedule=None, seed=0, use_ema=true))]
fn separate(
    py: Python<'_>,
    model: PathBuf,
    mixture: Vec<f64>,
    sources: usize,
    schedule: Option<&str>,
    seed: u64,
    use_ema: bool,
) -> PyResult<Vec<Vec<f64>>> {
    let schedule = schedule.map(str::parse::<ScheduleKind>).transpose().map_err(to_py)?;
    let est = py.detach(move || -> flowsep::Result<Stack> {
        let (cfg, mut net) = load_model(&model)?;
        net.set_use_ema(use_ema);
        let schedule = make_schedule(schedule.unwrap_or(cfg.sample.schedule))?;
        let mean: Vec<f64> = mixture.iter().map(|v| v / sources.max(1) as f64).collect();
        let shaper = cfg.noise.shaper(&mean, cfg.model.sample_rate)?;
        run_separate(&net, &mixture, sources, &shaper, &schedule, seed)
    });
    Ok(rows(&est.map_err(to_py)?))
}

#[pymodule]
fn flowsep_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(schedule_times, m)?)?;
    m.add_function(wrap_pyfunction!(project_perp, m)?)?;
    m.add_function(wrap_pyfunction!(si_sdr, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    m.add_function(wrap_pyfunction!(separate, m)?)?;
    Ok(())
}
