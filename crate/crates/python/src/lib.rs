//! Python bindings: scenario configuration, the collect/offline/attack
//! pipeline, identified models, latent covers and the attack closed form.

use std::path::PathBuf;

use fdilab::attack::optimal_offset;
use fdilab::harness;
use fdilab::log::{LogRow, CSV_HEADER};
use fdilab::plant::PlantState;
use fdilab::safeset::{self, CoverKind};
use fdilab::sysid::{self, LinearSsModel, SysIdOptions};
use fdilab::{AttackNorm, OfflineArtifacts, RunMetrics, ScenarioConfig};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyComplex;

fn err(e: fdilab::Error) -> PyErr {
    match e {
        fdilab::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn parse_norm(norm: &str) -> PyResult<AttackNorm> {
    match norm {
        "two" => Ok(AttackNorm::Two),
        "inf" => Ok(AttackNorm::Inf),
        other => Err(PyValueError::new_err(format!("unknown norm {other:?}; use \"two\" or \"inf\""))),
    }
}

/// Scenario configuration; defaults reproduce the pendulum experiment.
#[pyclass(name = "Scenario", from_py_object)]
#[derive(Clone)]
struct PyScenario {
    inner: ScenarioConfig,
}

#[pymethods]
impl PyScenario {
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(text) => ScenarioConfig::from_toml(text).map_err(err)?,
            None => ScenarioConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ScenarioConfig::load(&path).map_err(err)?,
        })
    }

    fn with_seed(&self, seed: u64) -> Self {
        Self {
            inner: self.inner.clone().with_seed(seed),
        }
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    #[getter]
    fn attack_enabled(&self) -> bool {
        self.inner.attack.enabled
    }

    #[setter]
    fn set_attack_enabled(&mut self, enabled: bool) {
        self.inner.attack.enabled = enabled;
    }

    /// Barrier value `h_S` of a pendulum state.
    fn h_s(&self, theta: f64, theta_dot: f64) -> f64 {
        self.inner.filter.value(PlantState::new(theta, theta_dot))
    }

    /// Safety-filtered control for desired input `u_c` at the given state.
    fn filter(&self, u_c: f64, theta: f64, theta_dot: f64) -> f64 {
        self.inner.safety_filter().filter(u_c, PlantState::new(theta, theta_dot)).u
    }
}

/// Time-indexed log of a closed-loop run.
#[pyclass(name = "DataLog", from_py_object)]
#[derive(Clone)]
struct PyDataLog {
    inner: fdilab::DataLog,
}

#[pymethods]
impl PyDataLog {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: fdilab::DataLog::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[staticmethod]
    fn columns() -> Vec<&'static str> {
        CSV_HEADER.split(',').collect()
    }

    /// Values of one CSV column.
    fn column(&self, name: &str) -> PyResult<Vec<f64>> {
        let get: fn(&LogRow) -> f64 = match name {
            "t" => |r| r.t,
            "u_c" => |r| r.u_c,
            "u" => |r| r.u,
            "y_true" => |r| r.y_true,
            "y_sent" => |r| r.y_sent,
            "yhat" => |r| r.yhat,
            "theta" => |r| r.theta,
            "thetadot" => |r| r.thetadot,
            "xhat1" => |r| r.xhat1,
            "xhat2" => |r| r.xhat2,
            "r" => |r| r.r,
            "alarm" => |r| r.alarm as f64,
            "hS_x" => |r| r.hs_x,
            "hS_xhat" => |r| r.hs_xhat,
            "hS_z" => |r| r.hs_z,
            "deactivated" => |r| r.deactivated as f64,
            other => return Err(PyKeyError::new_err(other.to_string())),
        };
        Ok(self.inner.rows.iter().map(get).collect())
    }

    fn alarm_count(&self) -> usize {
        self.inner.alarm_count()
    }

    fn data_hash(&self) -> String {
        self.inner.data_hash()
    }
}

/// Identified latent model of the observer.
#[pyclass(name = "Model", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: LinearSsModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: LinearSsModel::from_json(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[getter]
    fn n_z(&self) -> usize {
        self.inner.n_z()
    }

    #[getter]
    fn a(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.a)
    }

    #[getter]
    fn bu(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.bu)
    }

    #[getter]
    fn by(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.by)
    }

    #[getter]
    fn k(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.k)
    }

    #[getter]
    fn c(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.c)
    }

    fn eigenvalues<'py>(&self, py: Python<'py>) -> Vec<Bound<'py, PyComplex>> {
        self.inner
            .eigenvalues()
            .iter()
            .map(|l| PyComplex::from_doubles(py, l.re, l.im))
            .collect()
    }

    fn markov_parameters(&self, count: usize) -> Vec<Vec<Vec<f64>>> {
        self.inner.markov_parameters(count).iter().map(rows).collect()
    }
}

/// Latent safe-set cover (ellipse or hull).
#[pyclass(name = "Cover", from_py_object)]
#[derive(Clone)]
struct PyCover {
    inner: safeset::Cover,
}

#[pymethods]
impl PyCover {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: safeset::Cover::from_json(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.inner {
            safeset::Cover::Ellipse(_) => "ellipse",
            safeset::Cover::Hull(_) => "hull",
        }
    }

    fn value(&self, z: Vec<f64>) -> f64 {
        self.inner.value(&DVector::from_vec(z))
    }

    fn gradient(&self, z: Vec<f64>) -> Vec<f64> {
        self.inner.h_tilde(&DVector::from_vec(z)).1.as_slice().to_vec()
    }
}

/// Model, cover and threshold bound produced by the offline phase.
#[pyclass(name = "Artifacts", from_py_object)]
#[derive(Clone)]
struct PyArtifacts {
    inner: OfflineArtifacts,
}

#[pymethods]
impl PyArtifacts {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: OfflineArtifacts::load(&dir).map_err(err)?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(err)
    }

    #[getter]
    fn model(&self) -> PyModel {
        PyModel {
            inner: self.inner.model.clone(),
        }
    }

    #[getter]
    fn cover(&self) -> PyCover {
        PyCover {
            inner: self.inner.cover.clone(),
        }
    }

    #[getter]
    fn delta_tilde(&self) -> f64 {
        self.inner.bound.delta_tilde
    }

    #[getter]
    fn id_rmse(&self) -> f64 {
        self.inner.id_rmse
    }
}

/// Summary metrics of an attack run.
#[pyclass(name = "Metrics", from_py_object)]
#[derive(Clone)]
struct PyMetrics {
    inner: RunMetrics,
}

#[pymethods]
impl PyMetrics {
    #[getter]
    fn min_hs_x(&self) -> f64 {
        self.inner.min_hs_x
    }

    #[getter]
    fn min_hs_xhat(&self) -> f64 {
        self.inner.min_hs_xhat
    }

    /// First time the true state left the safe set; `inf` if it never did.
    #[getter]
    fn first_exit_time(&self) -> f64 {
        self.inner.first_exit_time
    }

    #[getter]
    fn alarm_count(&self) -> usize {
        self.inner.alarm_count
    }

    #[getter]
    fn max_abs_r(&self) -> f64 {
        self.inner.max_abs_r
    }

    #[getter]
    fn deactivation_count(&self) -> usize {
        self.inner.deactivation_count
    }

    fn is_success(&self, scenario: &PyScenario) -> bool {
        self.inner.is_success(&scenario.inner.attack.success)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }
}

/// Nominal data collection; raises if the detector alarms.
#[pyfunction]
fn collect(scenario: &PyScenario) -> PyResult<PyDataLog> {
    Ok(PyDataLog {
        inner: harness::run_collect(&scenario.inner).map_err(err)?,
    })
}

/// Identification, latent cover and threshold bound from a collected log.
#[pyfunction]
#[pyo3(signature = (scenario, log, out=None))]
fn offline(scenario: &PyScenario, log: &PyDataLog, out: Option<PathBuf>) -> PyResult<PyArtifacts> {
    Ok(PyArtifacts {
        inner: harness::run_offline(&scenario.inner, &log.inner, out.as_deref()).map_err(err)?,
    })
}

/// Closed-loop run with the adversary on the measurement channel.
#[pyfunction]
fn attack(scenario: &PyScenario, artifacts: &PyArtifacts) -> PyResult<(PyDataLog, PyMetrics)> {
    let (log, metrics) = harness::run_attack(&scenario.inner, &artifacts.inner).map_err(err)?;
    Ok((PyDataLog { inner: log }, PyMetrics { inner: metrics }))
}

/// Subspace identification of the observer from a log.
#[pyfunction]
#[pyo3(signature = (log, order=2, horizon=10, train_fraction=0.8))]
fn identify(log: &PyDataLog, order: usize, horizon: usize, train_fraction: f64) -> PyResult<PyModel> {
    let opts = SysIdOptions {
        order,
        horizon,
        train_fraction,
    };
    Ok(PyModel {
        inner: sysid::identify(&log.inner, &opts).map_err(err)?.model,
    })
}

/// Fits a cover to points given as a list of coordinate lists.
#[pyfunction]
#[pyo3(signature = (points, kind="ellipse", tol=safeset::DEFAULT_MVEE_TOL))]
fn fit_cover(points: Vec<Vec<f64>>, kind: &str, tol: f64) -> PyResult<PyCover> {
    let dim = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != dim) {
        return Err(PyValueError::new_err("points must share one dimension"));
    }
    let kind = match kind {
        "ellipse" => CoverKind::Ellipse,
        "hull" => CoverKind::Hull,
        other => return Err(PyValueError::new_err(format!("unknown cover kind {other:?}"))),
    };
    let m = DMatrix::from_fn(dim, points.len(), |r, c| points[c][r]);
    Ok(PyCover {
        inner: safeset::fit_cover(&m, kind, tol).map_err(err)?,
    })
}

/// Offset maximizing `g . d` subject to `||d|| <= delta`.
#[pyfunction]
#[pyo3(signature = (g, delta, norm="inf"))]
fn attack_offset(g: Vec<f64>, delta: f64, norm: &str) -> PyResult<Vec<f64>> {
    let d = optimal_offset(&DVector::from_vec(g), delta, parse_norm(norm)?);
    Ok(d.as_slice().to_vec())
}

#[pymodule]
fn pyfdilab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyDataLog>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyCover>()?;
    m.add_class::<PyArtifacts>()?;
    m.add_class::<PyMetrics>()?;
    m.add_function(wrap_pyfunction!(collect, m)?)?;
    m.add_function(wrap_pyfunction!(offline, m)?)?;
    m.add_function(wrap_pyfunction!(attack, m)?)?;
    m.add_function(wrap_pyfunction!(identify, m)?)?;
    m.add_function(wrap_pyfunction!(fit_cover, m)?)?;
    m.add_function(wrap_pyfunction!(attack_offset, m)?)?;
    Ok(())
}
