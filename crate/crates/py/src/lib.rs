//! Python bindings. Matrices go in and out as lists of rows.
//!
//! With `status` given, `y` holds raw positive survival times (status 1 =
//! event); they are log-transformed before fitting, as in the CLI.

use gxe_core::aft;
use gxe_core::baselines::{self, HierMcp, Smcp};
use gxe_core::benchmark::{GridSpec, Method};
use gxe_core::evaluation;
use gxe_core::model::{FittedModel, PreparedData};
use gxe_core::penalties::{build_adjacency, build_laplacian_penalty, build_spline_penalty};
use gxe_core::simulation::{self, ScenarioSpec};
use gxe_core::tuning::{self, grid_search, Estimator, GridOptions, Hierarchical};
use gxe_core::{Dataset, FitResult, GxeError, McpParams, PenaltyMatrix, SolverConfig};
use nalgebra::DMatrix;
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: GxeError) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn matrix(rows: &[Vec<f64>], n: usize, what: &str) -> PyResult<DMatrix<f64>> {
    if rows.len() != n {
        return Err(PyValueError::new_err(format!("{what} has {} rows, expected {n}", rows.len())));
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err(format!("{what} rows have unequal lengths")));
    }
    Ok(DMatrix::from_fn(n, cols, |i, j| rows[i][j]))
}

fn dataset(y: Vec<f64>, z: &[Vec<f64>], x: &[Vec<f64>], status: Option<Vec<bool>>) -> PyResult<Dataset> {
    let n = y.len();
    let (zm, xm) = (matrix(z, n, "z")?, matrix(x, n, "x")?);
    let y = match &status {
        Some(_) => {
            if let Some(t) = y.iter().find(|t| t.is_nan() || **t <= 0.0) {
                return Err(PyValueError::new_err(format!("survival time {t} must be > 0")));
            }
            y.iter().map(|t| t.ln()).collect()
        }
        None => y,
    };
    Dataset::new(y, status, zm, xm).map_err(err)
}

fn penalty(kind: &str, d: &Dataset, alpha_cut: f64) -> PyResult<PenaltyMatrix> {
    match kind {
        "spline" => build_spline_penalty(d.p()),
        "laplacian" => build_adjacency(d.x(), alpha_cut).and_then(|a| build_laplacian_penalty(&a)),
        "none" => Ok(PenaltyMatrix::none(d.p())),
        _ => return Err(PyValueError::new_err(format!("unknown penalty `{kind}` (spline, laplacian or none)"))),
    }
    .map_err(err)
}

fn estimator(method: &str) -> PyResult<&'static dyn Estimator> {
    match method.parse::<Method>().map_err(err)? {
        Method::Proposed => Ok(&Hierarchical),
        Method::HierMcp => Ok(&HierMcp),
        Method::Smcp => Ok(&Smcp),
        Method::Ma => Err(PyValueError::new_err("MA is not penalized; use fit_marginal")),
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn model_dict<'py>(py: Python<'py>, model: &FittedModel, fit: Option<&FitResult>) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    let e = &model.effects;
    let eta: Vec<Vec<f64>> = e.eta.chunks(e.p().max(1)).map(<[f64]>::to_vec).collect();
    out.set_item("intercept", model.intercept)?;
    out.set_item("alpha", e.alpha.clone())?;
    out.set_item("beta", e.beta.clone())?;
    out.set_item("eta", eta)?;
    out.set_item("main", model.pattern.main.clone())?;
    out.set_item("interactions", model.pattern.interactions.clone())?;
    if let Some(f) = fit {
        out.set_item("lambda1", f.mcp.lambda1)?;
        out.set_item("lambda2", f.mcp.lambda2)?;
        out.set_item("converged", f.converged)?;
        out.set_item("iterations", f.iterations)?;
        out.set_item("objective_trace", f.objective_trace.clone())?;
    }
    Ok(out)
}

/// Fit at fixed penalty levels. `lambda1` is on the standardized scale.
#[pyfunction]
#[pyo3(signature = (y, z, x, lambda1, lambda2=0.0, status=None, penalty_kind="spline", method="proposed", r=3.0, alpha_cut=0.05))]
#[allow(clippy::too_many_arguments)]
fn fit<'py>(
    py: Python<'py>,
    y: Vec<f64>,
    z: Vec<Vec<f64>>,
    x: Vec<Vec<f64>>,
    lambda1: f64,
    lambda2: f64,
    status: Option<Vec<bool>>,
    penalty_kind: &str,
    method: &str,
    r: f64,
    alpha_cut: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let raw = dataset(y, &z, &x, status)?;
    let j = penalty(penalty_kind, &raw, alpha_cut)?;
    let est = estimator(method)?;
    let cfg = SolverConfig::new(McpParams::new(lambda1, lambda2, r).map_err(err)?);
    let (model, fit) = py
        .detach(|| {
            let prep = PreparedData::new(&raw)?;
            let fit = est.fit(&prep.ls, &j, &cfg, None)?;
            Ok::<_, GxeError>((prep.to_model(&fit.effects, fit.pattern.clone()), fit))
        })
        .map_err(err)?;
    model_dict(py, &model, Some(&fit))
}

/// Tune both penalty levels by BIC and return the selected fit.
#[pyfunction]
#[pyo3(signature = (y, z, x, status=None, penalty_kind="spline", method="proposed", n_lambda1=50, lambda1_min_ratio=0.01, lambda2=None, alpha_cut=0.05))]
#[allow(clippy::too_many_arguments)]
fn tune<'py>(
    py: Python<'py>,
    y: Vec<f64>,
    z: Vec<Vec<f64>>,
    x: Vec<Vec<f64>>,
    status: Option<Vec<bool>>,
    penalty_kind: &str,
    method: &str,
    n_lambda1: usize,
    lambda1_min_ratio: f64,
    lambda2: Option<Vec<f64>>,
    alpha_cut: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let raw = dataset(y, &z, &x, status)?;
    let j = penalty(penalty_kind, &raw, alpha_cut)?;
    let est = estimator(method)?;
    let hier = method.eq_ignore_ascii_case("hiermcp");
    let spec = GridSpec { n_lambda1, lambda1_min_ratio, lambda2_values: lambda2 };
    let (model, res) = py
        .detach(|| {
            let prep = PreparedData::new(&raw)?;
            let grid = if hier { baselines::hiermcp_grid(&prep.ls)? } else { spec.resolve(&prep.ls, &j)? };
            let cfg = SolverConfig::new(McpParams::new(grid.lambda1_values[0], grid.lambda2_values[0], grid.r)?);
            let res = grid_search(&prep.ls, &j, &grid, &cfg, est, GridOptions::for_data(&prep.ls))?;
            Ok::<_, GxeError>((prep.to_model(&res.best.effects, res.best.pattern.clone()), res))
        })
        .map_err(err)?;
    let out = model_dict(py, &model, Some(&res.best))?;
    out.set_item("bic", res.bic)?;
    Ok(out)
}

/// Marginal analysis with Benjamini-Hochberg control.
#[pyfunction]
#[pyo3(signature = (y, z, x, status=None, fdr=0.05))]
fn fit_marginal<'py>(
    py: Python<'py>,
    y: Vec<f64>,
    z: Vec<Vec<f64>>,
    x: Vec<Vec<f64>>,
    status: Option<Vec<bool>>,
    fdr: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let raw = dataset(y, &z, &x, status)?;
    let r = py.detach(|| baselines::fit_marginal(&raw, fdr)).map_err(err)?;
    let out = model_dict(py, &r.model, None)?;
    out.set_item("p_main", r.p_main)?;
    out.set_item("p_interaction", r.p_interaction)?;
    Ok(out)
}

fn data_dict<'py>(py: Python<'py>, d: &Dataset) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    match d.delta() {
        Some(delta) => {
            out.set_item("y", d.y().iter().map(|v| v.exp()).collect::<Vec<_>>())?;
            out.set_item("status", delta.to_vec())?;
        }
        None => {
            out.set_item("y", d.y().to_vec())?;
            out.set_item("status", py.None())?;
        }
    }
    out.set_item("z", rows(d.z()))?;
    out.set_item("x", rows(d.x()))?;
    Ok(out)
}

/// One replicate of a named scenario, e.g. `ar03-m1-linear`.
#[pyfunction]
#[pyo3(signature = (scenario, n=None, p=None, seed=0, replicate=0, test_n=100))]
fn simulate<'py>(
    py: Python<'py>,
    scenario: &str,
    n: Option<usize>,
    p: Option<usize>,
    seed: u64,
    replicate: u64,
    test_n: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let spec: ScenarioSpec = scenario.parse().map_err(err)?;
    let spec = spec.with_size(n.unwrap_or(spec.n), p.unwrap_or(spec.p)).with_seed(seed);
    let sim = py.detach(|| simulation::simulate(&spec, test_n, replicate)).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("train", data_dict(py, &sim.train)?)?;
    out.set_item("test", data_dict(py, &sim.test)?)?;
    let t = &sim.truth.theta0;
    out.set_item("alpha", t.alpha.clone())?;
    out.set_item("beta", t.beta.clone())?;
    out.set_item("eta", t.eta.chunks(t.p()).map(<[f64]>::to_vec).collect::<Vec<_>>())?;
    out.set_item("censoring", sim.censoring_fraction())?;
    Ok(out)
}

/// Kaplan-Meier weights for observations already sorted by time.
#[pyfunction]
fn km_weights(status: Vec<bool>) -> PyResult<Vec<f64>> {
    aft::km_weights(&status).map(|w| w.w).map_err(err)
}

/// Censoring-weighted concordance of predicted log-times.
#[pyfunction]
fn concordance(predicted: Vec<f64>, time: Vec<f64>, status: Vec<bool>) -> PyResult<f64> {
    evaluation::concordance(&predicted, &time, &status).map_err(err)
}

#[pyfunction]
fn bh_adjust(pvalues: Vec<f64>) -> PyResult<Vec<f64>> {
    baselines::bh_adjust(&pvalues).map_err(err)
}

/// Dense second-difference penalty matrix.
#[pyfunction]
fn spline_penalty(p: usize) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&build_spline_penalty(p).map_err(err)?.to_dense()))
}

#[pyfunction]
fn bic(rss: f64, n: usize, df: usize) -> PyResult<f64> {
    tuning::bic_from_parts(rss, n, df).map_err(err)
}

#[pymodule]
fn gxe(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(tune, m)?)?;
    m.add_function(wrap_pyfunction!(fit_marginal, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(km_weights, m)?)?;
    m.add_function(wrap_pyfunction!(concordance, m)?)?;
    m.add_function(wrap_pyfunction!(bh_adjust, m)?)?;
    m.add_function(wrap_pyfunction!(spline_penalty, m)?)?;
    m.add_function(wrap_pyfunction!(bic, m)?)?;
    Ok(())
}
