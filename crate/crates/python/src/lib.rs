//! Python bindings for `lvnet`.
//!
//! Run settings are passed as a dict whose keys are the CLI flag names
//! (`"cmp-rate"` or `cmp_rate`).

use std::path::PathBuf;

use lvnet::cli::{cmd_eval, cmd_train, RunConfig};
use lvnet::costing;
use lvnet::data::{make_synthetic, ImageBatch, LabeledImageSet, SyntheticKind};
use lvnet::gradcheck::{gradient_check, tiny_config, GradCheckOptions};
use lvnet::lookup::{self, LookupTables, TableKind};
use lvnet::network::Model;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict};

fn to_py(e: lvnet::Error) -> PyErr {
    match e {
        lvnet::Error::Io(io) => PyOSError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Builds a run config from `(key, value)` pairs; `_` in keys reads as `-`.
pub fn config_from_pairs(pairs: &[(String, String)]) -> lvnet::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (k, v) in pairs {
        cfg.set(&k.replace('_', "-"), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pairs_of(settings: Option<&Bound<'_, PyDict>>) -> PyResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    if let Some(d) = settings {
        for (k, v) in d.iter() {
            let value = if v.is_instance_of::<PyBool>() {
                v.extract::<bool>()?.to_string()
            } else {
                v.str()?.to_string()
            };
            out.push((k.str()?.to_string(), value));
        }
    }
    Ok(out)
}

/// Accuracy lines (`name: value`) as a dict.
fn parse_report<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for line in text.lines() {
        if let Some((k, v)) = line.split_once(": ") {
            match v.parse::<f64>() {
                Ok(x) => d.set_item(k.replace('-', "_"), x)?,
                Err(_) => d.set_item(k.replace('-', "_"), v)?,
            }
        }
    }
    Ok(d)
}

/// Learnable per-color lookup tables.
#[pyclass(name = "Tables", module = "lvnet")]
pub struct PyTables {
    inner: LookupTables,
}

#[pymethods]
impl PyTables {
    /// Full tables: 256 vectors of length `dim` per channel.
    #[staticmethod]
    #[pyo3(signature = (dim, seed=0))]
    fn full(dim: usize, seed: u64) -> PyResult<Self> {
        let inner = LookupTables::init(TableKind::Full { dim }, seed).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Compressed tables: one scalar per `cmp_rate` consecutive colors.
    #[staticmethod]
    #[pyo3(signature = (cmp_rate, seed=0))]
    fn compressed(cmp_rate: usize, seed: u64) -> PyResult<Self> {
        let inner = LookupTables::init(TableKind::Compressed { cmp_rate }, seed).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.entries().shape().to_vec()
    }

    #[getter]
    fn output_channels(&self) -> usize {
        self.inner.output_channels()
    }

    fn entries(&self) -> Vec<f64> {
        self.inner.entries().data().to_vec()
    }

    fn get(&self, channel: usize, row: usize, component: usize) -> PyResult<f64> {
        let shape = self.inner.entries().shape();
        if channel >= shape[0] || row >= shape[1] || component >= shape.get(2).copied().unwrap_or(1) {
            return Err(PyValueError::new_err(format!("index out of range for shape {shape:?}")));
        }
        Ok(self.inner.get(channel, row, component))
    }

    /// Codes `n` channel-planar images; returns `(values, shape)`.
    fn lookup(&self, pixels: Vec<u8>, n: usize, height: usize, width: usize) -> PyResult<(Vec<f64>, Vec<usize>)> {
        let batch = ImageBatch::new(pixels, n, height, width).map_err(to_py)?;
        let t = self.inner.lookup(&batch).values;
        Ok((t.data().to_vec(), t.shape().to_vec()))
    }

    fn __repr__(&self) -> String {
        format!("Tables({:?}, shape={:?})", self.inner.kind(), self.inner.entries().shape())
    }
}

/// A labelled set of 8-bit RGB images.
#[pyclass(name = "Dataset", module = "lvnet")]
pub struct PyDataset {
    inner: LabeledImageSet,
}

#[pymethods]
impl PyDataset {
    /// `kind` is `"separable"` or `"striped"`.
    #[staticmethod]
    #[pyo3(signature = (kind, per_class, classes=10, side=16, seed=0))]
    fn synthetic(kind: &str, per_class: usize, classes: usize, side: usize, seed: u64) -> PyResult<Self> {
        let kind: SyntheticKind = kind.parse().map_err(to_py)?;
        let inner = make_synthetic(kind, per_class, classes, side, side, seed).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    fn image(&self, i: usize) -> PyResult<Vec<u8>> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!("image {i} out of range")));
        }
        Ok(self.inner.image(i).to_vec())
    }
}

#[pyfunction]
fn compressed_index(color: i64, cmp_rate: usize) -> PyResult<usize> {
    lookup::compressed_index(color, cmp_rate).map_err(to_py)
}

#[pyfunction]
fn extra_params(u: u64, k: u64, j: u64) -> PyResult<u64> {
    if u == 0 {
        return Err(PyValueError::new_err("u must be at least 1"));
    }
    Ok(costing::extra_params(u, k, j))
}

#[pyfunction]
fn extra_flops(m: u64, n: u64, s: u64, k: u64, j: u64, u: u64) -> PyResult<u64> {
    if u == 0 || s == 0 {
        return Err(PyValueError::new_err("u and s must be at least 1"));
    }
    Ok(costing::extra_flops(m, n, s, k, j, u))
}

#[pyfunction]
fn pixel_bits(cmp_rate: usize) -> u32 {
    costing::pixel_bits(cmp_rate)
}

/// Trains with the given settings, writes checkpoint and metrics under
/// `out`, and returns the final test accuracies.
#[pyfunction]
#[pyo3(signature = (settings=None))]
fn train<'py>(py: Python<'py>, settings: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config_from_pairs(&pairs_of(settings)?).map_err(to_py)?;
    let out = py.detach(|| cmd_train(&cfg)).map_err(to_py)?;
    let d = parse_report(py, &out.stdout)?;
    d.set_item("out", cfg.out.display().to_string())?;
    Ok(d)
}

/// Test accuracies of a checkpoint under the given settings.
#[pyfunction]
#[pyo3(signature = (checkpoint, settings=None))]
fn evaluate<'py>(py: Python<'py>, checkpoint: PathBuf, settings: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config_from_pairs(&pairs_of(settings)?).map_err(to_py)?;
    let out = py.detach(|| cmd_eval(&checkpoint, &cfg)).map_err(to_py)?;
    parse_report(py, &out.stdout)
}

/// Finite-difference check of all weights and table entries of a tiny model.
#[pyfunction]
#[pyo3(signature = (table="full", dim=2, cmp_rate=16, seed=0))]
fn gradcheck<'py>(py: Python<'py>, table: &str, dim: usize, cmp_rate: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let kind = match table {
        "full" => TableKind::Full { dim },
        "compressed" => TableKind::Compressed { cmp_rate },
        other => return Err(PyValueError::new_err(format!("unknown table kind `{other}`"))),
    };
    let tables = LookupTables::init(kind, seed + 1).map_err(to_py)?;
    let model = Model::build(tiny_config(kind.output_channels(), seed)).map_err(to_py)?;
    let set = make_synthetic(SyntheticKind::Striped, 1, 3, 8, 8, seed).map_err(to_py)?;
    let (batch, labels) = set.all();
    let r = py
        .detach(|| gradient_check(&model, &tables, &batch, &labels, &GradCheckOptions::default()))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("weight_error", r.weight_error)?;
    d.set_item("table_error", r.table_error)?;
    d.set_item("parameters", model.param_count() + tables.param_count())?;
    d.set_item("passed", r.passed())?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "lvnet")]
fn lvnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTables>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(compressed_index, m)?)?;
    m.add_function(wrap_pyfunction!(extra_params, m)?)?;
    m.add_function(wrap_pyfunction!(extra_flops, m)?)?;
    m.add_function(wrap_pyfunction!(pixel_bits, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add("COLORS", lookup::COLORS)?;
    Ok(())
}
