//! Python bindings. Arrays cross the boundary as nested lists of floats.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use overprune::data::{generate_teacher as teacher_data, TeacherSpec};
use overprune::diagnostics::{mean_predictive_ll, unit_report, PruneThresholds};
use overprune::numerics::log_mean_exp as lme;
use overprune::posterior::kl_diag_gauss as kl_diag;
use overprune::training::{train as train_rs, TrainConfig};
use overprune::{Dataset, Error, Family, Matrix, NetworkShape, Prior, RngState, VariationalPosterior};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::NonFiniteLoss { .. } | Error::AllRunsDiverged => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn dataset(x: Vec<Vec<f64>>, y: Vec<f64>) -> PyResult<Dataset> {
    let rows = x.len();
    let cols = x.first().map_or(0, Vec::len);
    if x.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("x rows have unequal lengths"));
    }
    let m = Matrix::from_vec(rows, cols, x.into_iter().flatten().collect()).map_err(to_py)?;
    Dataset::new(m, y).map_err(to_py)
}

/// A trained posterior together with its prior scale.
#[pyclass(name = "Posterior", skip_from_py_object)]
#[derive(Clone)]
struct PyPosterior {
    inner: VariationalPosterior,
    prior_std: f64,
}

#[pymethods]
impl PyPosterior {
    #[getter]
    fn family(&self) -> String {
        self.inner.family().to_string()
    }

    #[getter]
    fn hidden_units(&self) -> usize {
        self.inner.shape().hidden_units
    }

    /// Flat parameter means `[W | b_w | V | b_v]`.
    fn mean(&self) -> Vec<f64> {
        self.inner.mean().to_flat()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[staticmethod]
    #[pyo3(signature = (text, prior_std=1.0))]
    fn from_json(text: &str, prior_std: f64) -> PyResult<Self> {
        let inner = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner, prior_std })
    }

    /// Mean held-out predictive log likelihood over `samples` shared draws.
    #[pyo3(signature = (x, y, samples=100, seed=0))]
    fn predictive_ll(&self, x: Vec<Vec<f64>>, y: Vec<f64>, samples: usize, seed: u64) -> PyResult<f64> {
        let ds = dataset(x, y)?;
        mean_predictive_ll(&self.inner, &ds, samples, &RngState::new(seed)).map_err(to_py)
    }

    /// Per-unit pruning report as a JSON string.
    #[pyo3(signature = (x, y, samples=25, seed=0))]
    fn pruning_report(&self, x: Vec<Vec<f64>>, y: Vec<f64>, samples: usize, seed: u64) -> PyResult<String> {
        let ds = dataset(x, y)?;
        let prior = Prior::new(self.prior_std).map_err(to_py)?;
        let report = unit_report(
            &self.inner,
            &prior,
            &ds,
            samples,
            PruneThresholds::for_prior(&prior),
            &RngState::new(seed),
        )
        .map_err(to_py)?;
        serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Posterior(family={}, hidden_units={}, prior_std={})",
            self.inner.family(),
            self.inner.shape().hidden_units,
            self.prior_std
        )
    }
}

/// Trains a model on already-standardized data; returns the posterior and
/// the training trace as CSV text.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (family, x, y, prior_std=1.0, hidden_units=50, iterations=None, seed=0))]
fn train(
    py: Python<'_>,
    family: &str,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    prior_std: f64,
    hidden_units: usize,
    iterations: Option<usize>,
    seed: u64,
) -> PyResult<(PyPosterior, String)> {
    let family: Family = family.parse().map_err(to_py)?;
    let ds = dataset(x, y)?;
    let shape = NetworkShape::new(ds.input_dim(), hidden_units).map_err(to_py)?;
    let prior = Prior::new(prior_std).map_err(to_py)?;
    let mut cfg = TrainConfig::for_family(family);
    cfg.seed = seed;
    if let Some(it) = iterations {
        cfg.iterations = it;
    }
    let outcome = py
        .detach(|| train_rs(family, &ds, None, shape, &prior, &cfg))
        .map_err(to_py)?;
    Ok((
        PyPosterior {
            inner: outcome.posterior,
            prior_std,
        },
        outcome.trace.to_csv(),
    ))
}

/// KL(N(mu, sigma²) ‖ N(0, prior_std²)).
#[pyfunction]
fn kl_diag_gauss(mu: f64, sigma: f64, prior_std: f64) -> PyResult<f64> {
    kl_diag(mu, sigma, prior_std).map_err(to_py)
}

#[pyfunction]
fn log_mean_exp(values: Vec<f64>) -> PyResult<f64> {
    lme(&values).map_err(to_py)
}

/// `n` points from a random one-input teacher network; returns `(x, y)`.
#[pyfunction]
#[pyo3(signature = (n, seed=0))]
fn generate_teacher(n: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let spec = TeacherSpec::default_synthetic();
    let (ds, _) = teacher_data(&spec, n, &mut RngState::new(seed)).map_err(to_py)?;
    let x = (0..ds.len()).map(|i| ds.x.row(i).to_vec()).collect();
    Ok((x, ds.y))
}

#[pymodule]
fn overprune_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPosterior>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(kl_diag_gauss, m)?)?;
    m.add_function(wrap_pyfunction!(log_mean_exp, m)?)?;
    m.add_function(wrap_pyfunction!(generate_teacher, m)?)?;
    Ok(())
}
