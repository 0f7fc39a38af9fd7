//! Python module `mra_py`: data generation, the three recovery methods,
//! moments, bounds, spiked predictions and the experiment runner.
//!
//! Signals and distributions cross the boundary as lists of floats.

use std::collections::BTreeMap;
use std::path::PathBuf;

use mra_core::bounds;
use mra_core::cyclic::{self, Distribution, Signal};
use mra_core::em::{run_em, EmOptions, EmVariant};
use mra_core::harness::{self, ExperimentConfig, ExperimentKind};
use mra_core::io;
use mra_core::ls::{run_ls, LsOptions};
use mra_core::model::{self, stream_rng, GeneratorConfig, ObservationSet};
use mra_core::moments::{self, MomentPair, MomentSource, TensorBudget};
use mra_core::spectral::{self, RecoveryResult, SpectralOptions};
use mra_core::spiked;
use mra_core::MraError;
use nalgebra::DMatrix;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: MraError) -> PyErr {
    match e {
        MraError::Io(_) | MraError::Csv(_) | MraError::Format(_) => PyIOError::new_err(e.to_string()),
        MraError::LengthMismatch { .. }
        | MraError::InvalidSignal
        | MraError::ZeroNorm
        | MraError::InvalidDistribution(_)
        | MraError::InvalidConfig(_)
        | MraError::ZeroSigma(_)
        | MraError::InvalidPeriod { .. }
        | MraError::BudgetExceeded { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn signal(v: Vec<f64>) -> PyResult<Signal> {
    Signal::new(v).map_err(to_py)
}

fn distribution(v: Vec<f64>) -> PyResult<Distribution> {
    Distribution::new(v).map_err(to_py)
}

/// `N x L` noisy shifted measurements.
#[pyclass(name = "Observations", frozen)]
struct PyObservations(ObservationSet);

#[pymethods]
impl PyObservations {
    #[new]
    fn new(rows: Vec<Vec<f64>>, sigma: f64) -> PyResult<Self> {
        ObservationSet::from_rows(&rows, sigma).map(PyObservations).map_err(to_py)
    }

    /// Binary or CSV container, detected from its first bytes.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        io::load_observations(&path).map(PyObservations).map_err(to_py)
    }

    /// CSV when the path ends in `.csv`, binary otherwise.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_observations(&self.0, &path).map_err(to_py)
    }

    #[getter]
    fn length(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn count(&self) -> usize {
        self.0.count()
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.0.sigma()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.0.rows().map(<[f64]>::to_vec).collect()
    }

    fn true_shifts(&self) -> Option<Vec<usize>> {
        self.0.true_shifts().map(<[usize]>::to_vec)
    }

    /// Debiased sample moments `(m1, m2)`.
    fn moments(&self) -> (Vec<f64>, Vec<Vec<f64>>) {
        pair_out(&moments::sample_moments(&self.0))
    }

    fn __repr__(&self) -> String {
        format!("Observations(L={}, N={}, sigma={})", self.0.len(), self.0.count(), self.0.sigma())
    }
}

/// Estimate of a recovery method.
#[pyclass(name = "Recovery", frozen, get_all)]
struct PyRecovery {
    x: Vec<f64>,
    rho: Vec<f64>,
    iterations: usize,
    objective: f64,
    converged: bool,
    eigen_gap: f64,
    ps_min: f64,
}

impl From<RecoveryResult> for PyRecovery {
    fn from(r: RecoveryResult) -> Self {
        let d = r.diagnostics;
        PyRecovery {
            x: r.x_hat.into_inner(),
            rho: r.rho_hat,
            iterations: d.iterations,
            objective: d.objective,
            converged: d.converged,
            eigen_gap: d.eigen_gap,
            ps_min: d.ps_min,
        }
    }
}

#[pymethods]
impl PyRecovery {
    fn __repr__(&self) -> String {
        format!(
            "Recovery(L={}, iterations={}, objective={:e}, converged={})",
            self.x.len(),
            self.iterations,
            self.objective,
            self.converged
        )
    }
}

fn pair_out(m: &MomentPair) -> (Vec<f64>, Vec<Vec<f64>>) {
    let m2 = m.m2();
    let rows = (0..m2.nrows()).map(|i| m2.row(i).iter().copied().collect()).collect();
    (m.m1().to_vec(), rows)
}

fn pair_in(m1: Vec<f64>, m2: Vec<Vec<f64>>, population: bool) -> PyResult<MomentPair> {
    let len = m1.len();
    if m2.len() != len || m2.iter().any(|r| r.len() != len) {
        return Err(PyValueError::new_err(format!("m2 must be {len} x {len}")));
    }
    let flat: Vec<f64> = m2.into_iter().flatten().collect();
    let source = if population {
        MomentSource::Population
    } else {
        MomentSource::Sample { count: 1, sigma: 0.0 }
    };
    MomentPair::new(m1, DMatrix::from_row_slice(len, len, &flat), source).map_err(to_py)
}

/// Draws `(observations, x, rho)`. `signal` is `haar`, `gaussian`,
/// `unit_gaussian` or comma-separated values; `distribution` is `uniform`,
/// `dirac`, `random`, `wrapped_gaussian:s`, `periodic:ell` or weights.
#[pyfunction]
#[pyo3(signature = (length, count, sigma, seed=0, signal="gaussian", distribution="random"))]
fn generate(
    length: usize,
    count: usize,
    sigma: f64,
    seed: u64,
    signal: &str,
    distribution: &str,
) -> PyResult<(PyObservations, Vec<f64>, Vec<f64>)> {
    let cfg = GeneratorConfig {
        len: length,
        count,
        sigma,
        seed,
        signal: signal.parse().map_err(to_py)?,
        distribution: distribution.parse().map_err(to_py)?,
    };
    let data = model::generate(&cfg).map_err(to_py)?;
    Ok((
        PyObservations(data.observations),
        data.signal.into_inner(),
        data.rho.into_inner(),
    ))
}

/// Runs `spectral`, `em`, `uniform_em` or `ls` on the observations.
#[pyfunction]
#[pyo3(signature = (obs, method="spectral", seed=0, max_iters=None, accelerate=false, reshuffle=true))]
fn recover(
    obs: &PyObservations,
    method: &str,
    seed: u64,
    max_iters: Option<usize>,
    accelerate: bool,
    reshuffle: bool,
) -> PyResult<PyRecovery> {
    let mut rng = stream_rng(seed, 0);
    let res = match method {
        "spectral" => {
            let opts = SpectralOptions {
                reshuffle,
                ..SpectralOptions::default()
            };
            spectral::recover(&obs.0, &opts, &mut rng)
        }
        "em" | "uniform_em" => {
            let mut opts = EmOptions {
                accelerate,
                variant: if method == "em" { EmVariant::Modified } else { EmVariant::Uniform },
                ..EmOptions::default()
            };
            if let Some(n) = max_iters {
                opts.max_iters = n;
            }
            run_em(&obs.0, &opts, &mut rng)
        }
        "ls" => {
            let mut opts = LsOptions::default();
            if let Some(n) = max_iters {
                opts.max_iters = n;
            }
            run_ls(&moments::sample_moments(&obs.0), &opts, &mut rng)
        }
        _ => return Err(PyValueError::new_err(format!("unknown method {method:?}"))),
    };
    res.map(PyRecovery::from).map_err(to_py)
}

/// `(m1, m2)` of `(x, rho)`.
#[pyfunction]
fn population_moments(x: Vec<f64>, rho: Vec<f64>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let m = moments::population_moments(&signal(x)?, &distribution(rho)?).map_err(to_py)?;
    Ok(pair_out(&m))
}

/// Exact inversion of `(m1, m2)`; returns `(x, rho)` up to a common shift.
#[pyfunction]
#[pyo3(signature = (m1, m2, population=true))]
fn invert_moments(m1: Vec<f64>, m2: Vec<Vec<f64>>, population: bool) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let (x, rho) = spectral::invert_moments(&pair_in(m1, m2, population)?).map_err(to_py)?;
    Ok((x.into_inner(), rho))
}

/// `min_s |R_s estimate - truth| / |truth|`.
#[pyfunction]
fn relative_error(estimate: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    cyclic::relative_error(&estimate, &truth).map_err(to_py)
}

/// `(shift, error)` with `R_shift candidate` closest to `reference`.
#[pyfunction]
fn align(candidate: Vec<f64>, reference: Vec<f64>) -> PyResult<(usize, f64)> {
    let a = cyclic::align(&candidate, &reference).map_err(to_py)?;
    Ok((a.shift, a.error))
}

/// `(R_s x)[i] = x[i - s]`.
#[pyfunction]
fn shift(x: Vec<f64>, s: i64) -> Vec<f64> {
    cyclic::rotate(&x, s)
}

/// Limiting squared cosine of the top sample eigenvector, zero below the
/// phase transition.
#[pyfunction]
fn predicted_cosine2(lam: f64, sigma: f64, gamma: f64) -> f64 {
    spiked::predicted_cosine2(lam, sigma, gamma).cos2
}

/// Sample size at which the spike reaches the phase transition.
#[pyfunction]
fn sample_threshold(length: usize, sigma: f64, x_norm: f64, rho_max: f64) -> f64 {
    spiked::sample_threshold(length, sigma, x_norm, rho_max)
}

/// Leading-order lower bound on the orbit MSE separating `(x, rho)` from
/// `(x_tilde, rho_tilde)`, as a dict.
#[pyfunction]
#[pyo3(signature = (x, rho, x_tilde, rho_tilde, count, sigma, max_order=3))]
fn orbit_bound(
    x: Vec<f64>,
    rho: Vec<f64>,
    x_tilde: Vec<f64>,
    rho_tilde: Vec<f64>,
    count: usize,
    sigma: f64,
    max_order: usize,
) -> PyResult<BTreeMap<&'static str, f64>> {
    let b = bounds::orbit_bound(
        &signal(x)?,
        &distribution(rho)?,
        &signal(x_tilde)?,
        &distribution(rho_tilde)?,
        count,
        sigma,
        max_order,
        &TensorBudget::default(),
    )
    .map_err(to_py)?;
    Ok(BTreeMap::from([
        ("order", b.order as f64),
        ("k_d", b.k_d),
        ("lambda_n", b.lambda_n),
        ("chi2", b.chi2),
        ("bound", b.bound),
        ("bound_product", b.bound_product),
        ("orbit_distance2", b.orbit_distance2),
    ]))
}

/// Partner of `x` sharing its first two moments under any `ell`-periodic
/// distribution.
#[pyfunction]
fn periodic_counterexample(x: Vec<f64>, ell: usize) -> PyResult<Vec<f64>> {
    moments::periodic_counterexample(&signal(x)?, ell)
        .map(Signal::into_inner)
        .map_err(to_py)
}

/// Runs an experiment kind and returns its rows as dicts.
#[pyfunction]
#[pyo3(signature = (kind, seed=0, overrides=None, paper_scale=false))]
fn run_experiment(
    kind: &str,
    seed: u64,
    overrides: Option<BTreeMap<String, String>>,
    paper_scale: bool,
) -> PyResult<Vec<BTreeMap<&'static str, PyReportValue>>> {
    let kind: ExperimentKind = kind.parse().map_err(to_py)?;
    let mut cfg = ExperimentConfig::new(kind);
    cfg.overrides = overrides.unwrap_or_default();
    cfg.paper_scale = paper_scale;
    let report = harness::run_experiment(&cfg, seed).map_err(to_py)?;
    Ok(report
        .rows
        .into_iter()
        .map(|r| {
            BTreeMap::from([
                ("experiment", PyReportValue::Text(r.experiment)),
                ("method", PyReportValue::Text(r.method)),
                ("L", PyReportValue::Int(r.len)),
                ("N", PyReportValue::Int(r.count)),
                ("sigma", PyReportValue::Float(r.sigma)),
                ("param", PyReportValue::Float(r.param)),
                ("statistic", PyReportValue::Text(r.statistic)),
                ("value", PyReportValue::Float(r.value)),
            ])
        })
        .collect())
}

#[derive(IntoPyObject)]
enum PyReportValue {
    Text(String),
    Int(usize),
    Float(f64),
}

#[pymodule]
fn mra_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyObservations>()?;
    m.add_class::<PyRecovery>()?;
    for f in [
        wrap_pyfunction!(generate, m)?,
        wrap_pyfunction!(recover, m)?,
        wrap_pyfunction!(population_moments, m)?,
        wrap_pyfunction!(invert_moments, m)?,
        wrap_pyfunction!(relative_error, m)?,
        wrap_pyfunction!(align, m)?,
        wrap_pyfunction!(shift, m)?,
        wrap_pyfunction!(predicted_cosine2, m)?,
        wrap_pyfunction!(sample_threshold, m)?,
        wrap_pyfunction!(orbit_bound, m)?,
        wrap_pyfunction!(periodic_counterexample, m)?,
        wrap_pyfunction!(run_experiment, m)?,
    ] {
        m.add_function(f)?;
    }
    Ok(())
}
