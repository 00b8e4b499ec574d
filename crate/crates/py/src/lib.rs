//! Python bindings. Matrices cross the boundary as lists of rows.

use nalgebra::{DMatrix, DVector};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pnlss_core::benchmarks::{self, GenerateSpec, System};
use pnlss_core::classify::{self, ClassifyOptions};
use pnlss_core::decoupling::{self, DecoupleOptions, OperatingPointSet};
use pnlss_core::pipeline::{self, PipelineConfig, Target};
use pnlss_core::{dof, io, metrics, spectrum, Dataset, Error, StateSpaceModel};

create_exception!(pnlss, PnlssError, PyException);
create_exception!(pnlss, UnstableError, PnlssError);

fn err(e: Error) -> PyErr {
    match e {
        Error::Unstable(m) => UnstableError::new_err(m),
        other => PnlssError::new_err(other.to_string()),
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PnlssError::new_err("ragged matrix"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

#[pyclass(name = "Model", module = "pnlss", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: StateSpaceModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: io::model_from_json(text).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: io::load_model(path.as_ref()).map_err(err)? })
    }

    /// The discrete-time Van der Pol truth model with default parameters.
    #[staticmethod]
    fn vdp_truth() -> PyResult<Self> {
        Ok(Self { inner: benchmarks::vdp_truth_model(&Default::default()).map_err(err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        io::model_to_json(&self.inner).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        io::save_model(path.as_ref(), &self.inner).map_err(err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    /// Branch count of the decoupled state map, `None` otherwise.
    #[getter]
    fn r_x(&self) -> Option<usize> {
        pipeline::decoupled_of(&self.inner, Target::State).map(|d| d.r())
    }

    #[getter]
    fn r_y(&self) -> Option<usize> {
        pipeline::decoupled_of(&self.inner, Target::Output).map(|d| d.r())
    }

    /// Returns a dict with `y`, `x` and `unstable`.
    #[pyo3(signature = (u, x0=None))]
    fn simulate<'py>(&self, py: Python<'py>, u: Vec<Vec<f64>>, x0: Option<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
        let u = to_matrix(&u)?;
        let x0 = x0.map(DVector::from_vec);
        let sim = self.inner.simulate(&u, x0.as_ref()).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("y", to_rows(&sim.y))?;
        d.set_item("x", to_rows(&sim.x))?;
        d.set_item("unstable", sim.unstable)?;
        Ok(d)
    }

    fn apply_state_transform(&self, t: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self { inner: self.inner.apply_state_transform(&to_matrix(&t)?).map_err(err)? })
    }

    fn __repr__(&self) -> String {
        let show = |r: Option<usize>| r.map_or("None".to_string(), |r| r.to_string());
        format!("Model(n={}, m={}, p={}, r_x={}, r_y={})", self.n(), self.m(), self.p(), show(self.r_x()), show(self.r_y()))
    }
}

fn dataset_dict<'py>(py: Python<'py>, ds: &Dataset) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("u", to_rows(&ds.u))?;
    d.set_item("y", to_rows(&ds.y))?;
    d.set_item("fs", ds.fs)?;
    d.set_item("x0", ds.x0.as_ref().map(|x| x.iter().copied().collect::<Vec<f64>>()))?;
    Ok(d)
}

/// Synthesises benchmark records; each is a dict with `u`, `y`, `fs`, `x0`.
#[pyfunction]
#[pyo3(signature = (system="vdp", realizations=1, seed=0, snr_db=None))]
fn generate<'py>(py: Python<'py>, system: &str, realizations: usize, seed: u64, snr_db: Option<f64>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let sys: System = parse(system)?;
    let mut spec = GenerateSpec { realizations, seed, ..GenerateSpec::for_system(sys) };
    if snr_db.is_some() {
        spec.snr_db = snr_db;
    }
    let data = benchmarks::generate(&spec).map_err(err)?;
    data.iter().map(|ds| dataset_dict(py, ds)).collect()
}

#[pyfunction]
fn load_dataset<'py>(py: Python<'py>, path: &str) -> PyResult<Bound<'py, PyDict>> {
    dataset_dict(py, &io::load_dataset(path.as_ref()).map_err(err)?)
}

#[pyfunction]
fn e_rms(y_meas: Vec<Vec<f64>>, y_sim: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::e_rms(&to_matrix(&y_meas)?, &to_matrix(&y_sim)?).map_err(err)
}

#[pyfunction]
fn kruskal_ok(n_in: usize, n_out: usize, r: usize) -> bool {
    decoupling::kruskal_ok(n_in, n_out, r)
}

/// Decouples the model's coupled `target` map at the given operating points.
/// Returns the new model and the diagnostics as a JSON string.
#[pyfunction]
#[pyo3(signature = (model, points, target="state", r=None, restarts=5, seed=0))]
fn decouple(model: &PyModel, points: Vec<Vec<f64>>, target: &str, r: Option<usize>, restarts: usize, seed: u64) -> PyResult<(PyModel, String)> {
    let t: Target = parse(target)?;
    let pts = OperatingPointSet::explicit(to_matrix(&points)?);
    let opts = DecoupleOptions { r, restarts, seed, ..Default::default() };
    let (m, diag) = pipeline::decouple_model(&model.inner, t, &pts, &opts).map_err(err)?;
    Ok((PyModel { inner: m }, serde_json::to_string(&diag).map_err(|e| err(e.into()))?))
}

/// Runs the reduction pipeline from a JSON config. Returns the final model
/// and the report as a JSON string.
#[pyfunction]
fn run_pipeline(config_json: &str) -> PyResult<(PyModel, String)> {
    let cfg = PipelineConfig::from_json(config_json).map_err(err)?;
    let out = pipeline::run_pipeline(&cfg).map_err(err)?;
    Ok((PyModel { inner: out.model }, serde_json::to_string(&out.report).map_err(|e| err(e.into()))?))
}

#[pyfunction]
fn count_dof(model: &PyModel, u: Vec<Vec<f64>>) -> PyResult<usize> {
    let u = to_matrix(&u)?;
    let probe = Dataset::new(u.clone(), DMatrix::zeros(u.nrows(), model.inner.p()), 1.0, None).map_err(err)?;
    dof::count_dof(&model.inner, &probe).map_err(err)
}

/// Returns a dict with `theta_z`, `precision` and `label`.
#[pyfunction]
fn classify_signals<'py>(py: Python<'py>, z: Vec<f64>, y: Vec<f64>, fs: f64) -> PyResult<Bound<'py, PyDict>> {
    let r = classify::classify_signals(&z, &y, fs, &ClassifyOptions::default()).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("theta_z", r.theta_z)?;
    d.set_item("precision", r.precision)?;
    d.set_item("label", serde_json::to_value(r.label).map_err(|e| err(e.into()))?.as_str().unwrap_or_default().to_string())?;
    Ok(d)
}

/// One-sided amplitude spectrum in dB: `(freq, rows of channels)`.
#[pyfunction]
fn spectrum_db(y: Vec<Vec<f64>>, fs: f64) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let s = spectrum::spectrum(&to_matrix(&y)?, fs).map_err(err)?;
    Ok((s.freq.clone(), to_rows(&s.db())))
}

#[pymodule]
fn pnlss(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PnlssError", m.py().get_type::<PnlssError>())?;
    m.add("UnstableError", m.py().get_type::<UnstableError>())?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(e_rms, m)?)?;
    m.add_function(wrap_pyfunction!(kruskal_ok, m)?)?;
    m.add_function(wrap_pyfunction!(decouple, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(count_dof, m)?)?;
    m.add_function(wrap_pyfunction!(classify_signals, m)?)?;
    m.add_function(wrap_pyfunction!(spectrum_db, m)?)?;
    Ok(())
}
