//! Python bindings for pocketllm.
//!
//! Matrices cross the boundary as lists of rows of floats.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pocketllm::format::ratio::{compression_ratio_bits, compression_ratio_params};
use pocketllm::tensor_store::{write_toy_model as toy_model, Role};
use pocketllm::{
    compress_model as run_model, compress_named_layer, load_manifest, load_pocket as load, reconstruct_layer,
    save_pocket as save, CompressConfig, CompressError, CompressedLayer, CompressedModel, FormatError, LayerFilter,
    Matrix, Scope, TrainReport,
};

create_exception!(pocketllm_py, PocketError, PyException);
create_exception!(pocketllm_py, ConfigError, PocketError);
create_exception!(pocketllm_py, DivergedError, PocketError);
create_exception!(pocketllm_py, CorruptFileError, PocketError);

fn compress_err(e: CompressError) -> PyErr {
    match e {
        CompressError::Config(_) | CompressError::Store(pocketllm::tensor_store::StoreError::NotDivisible { .. }) => {
            ConfigError::new_err(e.to_string())
        }
        CompressError::Diverged { .. } => DivergedError::new_err(e.to_string()),
        _ => PocketError::new_err(e.to_string()),
    }
}

fn format_err(e: FormatError) -> PyErr {
    match e {
        FormatError::Io { .. } => PocketError::new_err(e.to_string()),
        _ => CorruptFileError::new_err(e.to_string()),
    }
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 {
        return Err(ConfigError::new_err("weights must be a non-empty list of non-empty rows"));
    }
    if rows.iter().any(|r| r.len() != cols) {
        return Err(ConfigError::new_err("rows have different lengths"));
    }
    let n = rows.len();
    Ok(Matrix::from_vec(n, cols, rows.into_iter().flatten().collect()))
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

/// One compressed weight matrix.
#[pyclass(name = "CompressedLayer", module = "pocketllm_py", frozen, from_py_object)]
#[derive(Clone)]
struct PyLayer {
    inner: CompressedLayer,
}

#[pymethods]
impl PyLayer {
    #[getter]
    fn name(&self) -> &str {
        &self.inner.meta.name
    }

    #[getter]
    fn role(&self) -> &'static str {
        self.inner.meta.role.as_str()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.meta.d_in, self.inner.meta.d_out)
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn indices(&self) -> Vec<u32> {
        self.inner.indices.clone()
    }

    #[getter]
    fn codewords(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.codebook.codewords)
    }

    /// Storage ratio against f32, counting codebook, indices and decoder.
    #[pyo3(signature = (linear_only=false))]
    fn ratio(&self, linear_only: bool) -> PyResult<f64> {
        let b = self.inner.budget(linear_only);
        Ok(compression_ratio_bits(b.n, b.d, b.k, b.n_fd).map_err(format_err)?.value())
    }

    fn reconstruct(&self, py: Python<'_>) -> PyResult<Vec<Vec<f64>>> {
        let w = py.detach(|| reconstruct_layer(&self.inner)).map_err(compress_err)?;
        Ok(to_rows(&w))
    }

    fn __repr__(&self) -> String {
        let (r, c) = self.shape();
        format!("CompressedLayer(name={:?}, shape=({r}, {c}), d={}, k={})", self.name(), self.d(), self.k())
    }
}

fn report_dict<'py>(py: Python<'py>, r: &TrainReport) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    out.set_item("layers", r.layers.clone())?;
    out.set_item("config", &r.config)?;
    out.set_item("mse_mean", r.final_metrics.mse_mean)?;
    out.set_item("mse_top100", r.final_metrics.mse_top100)?;
    out.set_item("vq_sum", r.final_metrics.vq_sum)?;
    out.set_item("frobenius_rel_err", r.final_metrics.frobenius_rel_err)?;
    out.set_item("used_codewords", r.used_codewords)?;
    out.set_item("k", r.k)?;
    out.set_item("diverged", r.diverged)?;
    out.set_item("codebook_frozen", r.codebook_frozen)?;
    out.set_item("wall_time_secs", r.wall_time_secs)?;
    let epochs: Vec<(usize, f64, f64, f64, f64)> =
        r.epochs.iter().map(|e| (e.epoch, e.vq_sum, e.mse_mean, e.rmse, e.mse_top100)).collect();
    out.set_item("epochs", epochs)?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn config(
    d: usize,
    k: usize,
    epochs: Option<usize>,
    lr: Option<f64>,
    lambda: Option<f64>,
    batch_rows: Option<usize>,
    seed: u64,
) -> CompressConfig {
    let mut cfg = CompressConfig::new(d, k);
    cfg.seed = seed;
    cfg.epochs = epochs.unwrap_or(cfg.epochs);
    cfg.lr = lr.unwrap_or(cfg.lr);
    cfg.lambda = lambda.unwrap_or(cfg.lambda);
    cfg.batch_rows = batch_rows.unwrap_or(cfg.batch_rows);
    cfg
}

/// Compresses one weight matrix. Returns the layer and a training report.
#[pyfunction]
#[pyo3(signature = (weights, d, k, *, name="layer", role="other", epochs=None, lr=None, lambda_=None, batch_rows=None, seed=0))]
#[allow(clippy::too_many_arguments)]
fn compress_layer<'py>(
    py: Python<'py>,
    weights: Vec<Vec<f64>>,
    d: usize,
    k: usize,
    name: &str,
    role: &str,
    epochs: Option<usize>,
    lr: Option<f64>,
    lambda_: Option<f64>,
    batch_rows: Option<usize>,
    seed: u64,
) -> PyResult<(PyLayer, Bound<'py, PyDict>)> {
    let w = to_matrix(weights)?;
    let role: Role = role.parse().map_err(ConfigError::new_err)?;
    let cfg = config(d, k, epochs, lr, lambda_, batch_rows, seed);
    let (layer, report) = py.detach(|| compress_named_layer(&w, name, role, 0, &cfg)).map_err(compress_err)?;
    Ok((PyLayer { inner: layer }, report_dict(py, &report)?))
}

/// Compresses the selected layers of a manifest. Returns the layers, one
/// report per training unit and `(layers, message)` for each failed unit.
#[pyfunction]
#[pyo3(signature = (manifest, d, k, *, layers="all", scope="per_layer", epochs=None, lr=None, lambda_=None, batch_rows=None, seed=0, jobs=1))]
#[allow(clippy::too_many_arguments)]
#[allow(clippy::type_complexity)]
fn compress_model<'py>(
    py: Python<'py>,
    manifest: &str,
    d: usize,
    k: usize,
    layers: &str,
    scope: &str,
    epochs: Option<usize>,
    lr: Option<f64>,
    lambda_: Option<f64>,
    batch_rows: Option<usize>,
    seed: u64,
    jobs: usize,
) -> PyResult<(PocketModel, Vec<Bound<'py, PyDict>>, Vec<(Vec<String>, String)>)> {
    let filter: LayerFilter = layers.parse().map_err(ConfigError::new_err)?;
    let mut cfg = config(d, k, epochs, lr, lambda_, batch_rows, seed);
    cfg.scope = scope.parse::<Scope>().map_err(ConfigError::new_err)?;
    let m = load_manifest(manifest).map_err(|e| PocketError::new_err(e.to_string()))?;
    let (model, report) = py.detach(|| run_model(&m, &cfg, &filter, jobs)).map_err(compress_err)?;
    let reports = report.units.iter().map(|r| report_dict(py, r)).collect::<PyResult<_>>()?;
    let failures = report.failures.into_iter().map(|f| (f.layers, f.message)).collect();
    Ok((PocketModel { inner: model }, reports, failures))
}

/// A set of compressed layers as stored in one pocket file.
#[pyclass(name = "PocketModel", module = "pocketllm_py", frozen)]
struct PocketModel {
    inner: CompressedModel,
}

#[pymethods]
impl PocketModel {
    #[new]
    #[pyo3(signature = (layers, scope="per_layer"))]
    fn new(layers: Vec<PyLayer>, scope: &str) -> PyResult<Self> {
        let scope = scope.parse::<Scope>().map_err(ConfigError::new_err)?;
        Ok(PocketModel { inner: CompressedModel { scope, layers: layers.into_iter().map(|l| l.inner).collect() } })
    }

    #[getter]
    fn scope(&self) -> String {
        self.inner.scope.to_string()
    }

    #[getter]
    fn layers(&self) -> Vec<PyLayer> {
        self.inner.layers.iter().cloned().map(|inner| PyLayer { inner }).collect()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save(path, &self.inner).map_err(format_err)
    }

    fn __len__(&self) -> usize {
        self.inner.layers.len()
    }
}

#[pyfunction]
fn load_pocket(path: &str) -> PyResult<PocketModel> {
    Ok(PocketModel { inner: load(path).map_err(format_err)? })
}

/// `32 N d / (16 K d + log2(K) N + 32 N_fd)`
#[pyfunction]
fn ratio_bits(n: u64, d: u64, k: u64, n_fd: u64) -> PyResult<f64> {
    Ok(compression_ratio_bits(n, d, k, n_fd).map_err(format_err)?.value())
}

/// `N d / (K d + N + N_fd)`
#[pyfunction]
fn ratio_params(n: u64, d: u64, k: u64, n_fd: u64) -> f64 {
    compression_ratio_params(n, d, k, n_fd).value()
}

/// Writes a small random transformer-shaped model; returns its layer names.
#[pyfunction]
#[pyo3(signature = (manifest, blocks=2, width=16, seed=0))]
fn write_toy_model(manifest: &str, blocks: u32, width: usize, seed: u64) -> PyResult<Vec<String>> {
    let m = toy_model(manifest, blocks, width, seed).map_err(|e| PocketError::new_err(e.to_string()))?;
    Ok(m.layers.into_iter().map(|l| l.name).collect())
}

#[pymodule]
fn pocketllm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLayer>()?;
    m.add_class::<PocketModel>()?;
    m.add_function(wrap_pyfunction!(compress_layer, m)?)?;
    m.add_function(wrap_pyfunction!(compress_model, m)?)?;
    m.add_function(wrap_pyfunction!(load_pocket, m)?)?;
    m.add_function(wrap_pyfunction!(ratio_bits, m)?)?;
    m.add_function(wrap_pyfunction!(ratio_params, m)?)?;
    m.add_function(wrap_pyfunction!(write_toy_model, m)?)?;
    let py = m.py();
    m.add("PocketError", py.get_type::<PocketError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("DivergedError", py.get_type::<DivergedError>())?;
    m.add("CorruptFileError", py.get_type::<CorruptFileError>())?;
    Ok(())
}
