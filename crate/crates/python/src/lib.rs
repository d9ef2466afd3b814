//! Python bindings for the misreport toolkit.

use misreport::cimetest;
use misreport::cmle::{self, CmleConfig, OrdConstraint};
use misreport::dataset::{ContingencyTable, Dataset, JointPmf, Support};
use misreport::error::Error;
use misreport::latent::{self, LatentConditional, Target};
use misreport::model::MisclassificationModel;
use misreport::simulate::{draw, make_model, GeneratorSpec};
use misreport::spectral::{self, SpectralOptions};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        1 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("matrix rows must be non-empty and of equal length"));
    }
    Ok(DMatrix::from_row_iterator(r, c, rows.into_iter().flatten()))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// One covariate cell's misclassification model.
#[pyclass(name = "Model", module = "misreport_py", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: MisclassificationModel,
}

#[pymethods]
impl PyModel {
    /// Columns of `m_x` and `m_z` are indexed by the latent state. `tol`
    /// loosens the column-sum check for rounded values.
    #[new]
    #[pyo3(signature = (m_x, f_y, m_z, f_xstar, tol = None))]
    fn new(
        m_x: Vec<Vec<f64>>,
        f_y: Vec<f64>,
        m_z: Vec<Vec<f64>>,
        f_xstar: Vec<f64>,
        tol: Option<f64>,
    ) -> PyResult<Self> {
        let (m_x, f_y, m_z, f_xstar) = (matrix(m_x)?, DVector::from_vec(f_y), matrix(m_z)?, DVector::from_vec(f_xstar));
        let inner = match tol {
            Some(t) => MisclassificationModel::with_tolerance(m_x, f_y, m_z, f_xstar, t),
            None => MisclassificationModel::new(m_x, f_y, m_z, f_xstar),
        }
        .map_err(to_py)?;
        Ok(PyModel { inner })
    }

    #[getter]
    fn m_x(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.m_x_given_xstar)
    }

    #[getter]
    fn f_y(&self) -> Vec<f64> {
        self.inner.f_y_given_xstar.iter().copied().collect()
    }

    #[getter]
    fn m_z(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.m_z_given_xstar)
    }

    #[getter]
    fn f_xstar(&self) -> Vec<f64> {
        self.inner.f_xstar.iter().copied().collect()
    }

    /// Joint probabilities of `(x, y, z)`, with z varying fastest.
    fn population_pmf(&self) -> Vec<f64> {
        self.inner.population_pmf().probs().to_vec()
    }

    fn marginal_x(&self) -> Vec<f64> {
        self.inner.marginal_x().iter().copied().collect()
    }

    #[pyo3(signature = (tol = 0.0))]
    fn ord_satisfied(&self, tol: f64) -> bool {
        self.inner.ord_satisfied(tol)
    }

    fn misclassification_rate(&self) -> f64 {
        self.inner.misclassification_rate()
    }

    fn max_abs_diff(&self, other: &PyModel) -> f64 {
        self.inner.max_abs_diff(&other.inner)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!("Model(s_x={}, s_z={}, f_xstar={:?})", self.inner.s_x(), self.inner.s_z(), self.f_xstar())
    }
}

/// Free parameters of the model with supports `(s_x, s_y, s_z)`.
#[pyfunction]
fn param_count(s_x: usize, s_y: usize, s_z: usize) -> usize {
    cmle::param_count(s_x, s_y, s_z)
}

fn pmf(probs: Vec<f64>, s_x: usize, s_z: usize) -> PyResult<JointPmf> {
    JointPmf::from_weights(probs, Support::new(s_x, 2, s_z)).map_err(to_py)
}

/// `max |f(y, z | x) - f(y | x) f(z | x)|` and the one-based `(x, y, z)`
/// where it is attained.
#[pyfunction]
fn ts_statistic(probs: Vec<f64>, s_x: usize, s_z: usize) -> PyResult<(f64, (usize, usize, usize))> {
    cimetest::ts_statistic(&pmf(probs, s_x, s_z)?).map_err(to_py)
}

/// Spectral identification from a joint probability vector.
#[pyfunction]
fn identify_spectral(probs: Vec<f64>, s_x: usize, s_z: usize) -> PyResult<PyModel> {
    let (inner, _) =
        spectral::eigendecompose_identify(&pmf(probs, s_x, s_z)?, &SpectralOptions::default()).map_err(to_py)?;
    Ok(PyModel { inner })
}

/// Maximum likelihood fit to a table of counts ordered like
/// [`PyModel::population_pmf`].
#[pyfunction]
#[pyo3(signature = (counts, s_x, s_z, n_starts = 10, seed = 0, enforce_ord = false))]
fn fit_cmle<'py>(
    py: Python<'py>,
    counts: Vec<u64>,
    s_x: usize,
    s_z: usize,
    n_starts: usize,
    seed: u64,
    enforce_ord: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let table = ContingencyTable::from_counts(counts, Support::new(s_x, 2, s_z), None).map_err(to_py)?;
    let config = CmleConfig {
        n_starts,
        seed,
        ord_constraint: if enforce_ord { OrdConstraint::Enforce } else { OrdConstraint::CheckOnly },
        ..CmleConfig::default()
    };
    let r = py.detach(|| cmle::fit(&table, &config)).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("model", PyModel { inner: r.model.clone() })?;
    out.set_item("loglik", r.loglik)?;
    out.set_item("n_starts_converged", r.n_starts_converged)?;
    out.set_item("n_starts_agreeing", r.n_starts_agreeing)?;
    out.set_item("boundary_flags", r.boundary_flags.clone())?;
    out.set_item("ord_satisfied", r.ord_satisfied)?;
    Ok(out)
}

/// Draws a model per covariate cell and `n` records from them. Returns
/// the models and the columns `x`, `y`, `z`, `w`, `x_star`.
#[pyfunction]
#[pyo3(signature = (s, strength, separation, seed, n, data_seed, n_w_cells = 1))]
fn simulate<'py>(
    py: Python<'py>,
    s: usize,
    strength: f64,
    separation: f64,
    seed: u64,
    n: usize,
    data_seed: u64,
    n_w_cells: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = GeneratorSpec { n_w_cells, ..GeneratorSpec::new(s, strength, separation, seed) };
    let models = make_model(&spec).map_err(to_py)?;
    let sample = draw(&models, &spec.weights(), &spec.w_names(), n, data_seed).map_err(to_py)?;
    let out = PyDict::new(py);
    let py_models: Vec<PyModel> = models.into_iter().map(|inner| PyModel { inner }).collect();
    out.set_item("models", py_models)?;
    let codes = |v: &[u8]| v.iter().map(|&c| c as u32).collect::<Vec<u32>>();
    out.set_item("x", codes(sample.data.x()))?;
    out.set_item("y", codes(sample.data.y()))?;
    out.set_item("z", codes(sample.data.z()))?;
    out.set_item("w", sample.data.w().iter().map(|&c| c as u32).collect::<Vec<u32>>())?;
    out.set_item("x_star", codes(&sample.xstar))?;
    Ok(out)
}

/// Bootstrap conditional independence test on coded records.
#[pyfunction]
#[pyo3(signature = (x, y, z, s_x, s_z, b = 999, seed = 0))]
fn bootstrap_test<'py>(
    py: Python<'py>,
    x: Vec<u32>,
    y: Vec<u32>,
    z: Vec<u32>,
    s_x: usize,
    s_z: usize,
    b: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let n = x.len();
    let code = |v: Vec<u32>| -> PyResult<Vec<u8>> {
        v.into_iter()
            .map(|c| u8::try_from(c).map_err(|_| PyValueError::new_err(format!("code {c} is out of range"))))
            .collect()
    };
    let data = Dataset::from_codes(code(x)?, code(y)?, code(z)?, vec![0; n], s_x, s_z, Vec::new()).map_err(to_py)?;
    let r = py.detach(|| cimetest::bootstrap_test(&data, None, b, seed)).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("statistic", r.statistic)?;
    out.set_item("p_value", r.p_value)?;
    out.set_item("critical_values", (r.critical_values.p90, r.critical_values.p95, r.critical_values.p99))?;
    out.set_item("stars", r.stars())?;
    Ok(out)
}

/// Closed-form heteroskedastic ordered probit from per-cell latent
/// distributions. `cells` lists `(cell_index, weight, probs)`.
#[pyfunction]
#[pyo3(signature = (w_names, cells, clamp = latent::DEFAULT_CLAMP))]
fn hetero_probit<'py>(
    py: Python<'py>,
    w_names: Vec<String>,
    cells: Vec<(usize, f64, Vec<f64>)>,
    clamp: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let lc = LatentConditional::new(&w_names, cells).map_err(to_py)?;
    let sked = latent::skedastic(&lc, clamp).map_err(to_py)?;
    let fit = latent::hetero_ordered_probit(&lc, &sked, Target::Latent, clamp).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("coefficient_names", fit.coefficient_names.clone())?;
    out.set_item("beta", fit.beta.clone())?;
    out.set_item("cutpoints", fit.cutpoints.clone())?;
    let sigma: Vec<(String, f64)> = fit.sigma_by_cell.iter().map(|c| (c.label.clone(), c.sigma)).collect();
    out.set_item("sigma", sigma)?;
    out.set_item("clamp_events", fit.clamp_events)?;
    Ok(out)
}

#[pymodule]
fn misreport_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(ts_statistic, m)?)?;
    m.add_function(wrap_pyfunction!(identify_spectral, m)?)?;
    m.add_function(wrap_pyfunction!(fit_cmle, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_test, m)?)?;
    m.add_function(wrap_pyfunction!(hetero_probit, m)?)?;
    Ok(())
}
