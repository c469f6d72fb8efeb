//! Python bindings for the `axunet` segmentation toolkit.
//!
//! Images cross the boundary as flat row-major float lists plus a shape;
//! masks come back as `(wt, tc, et)` lists of 0/1 bytes.

use std::path::PathBuf;
use std::str::FromStr;

use clap::Parser;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use axunet::cli::{run, Cli};
use axunet::data::{self, store, PreprocessOptions, SlicePair};
use axunet::gradcam::{self, GradCamRequest, Region};
use axunet::model::{predict_masks, CombineMode, Model, ModelConfig};
use axunet::train::{self as tr, Checkpoint, TrainConfig};
use axunet::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    let msg = format!("{}: {}", e.code(), e);
    match e {
        Error::Config(_) => PyValueError::new_err(msg),
        Error::Io { .. } => PyIOError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(a) => {
            let items = a.iter().map(|x| json_to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any()
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn to_py<'py, S: serde::Serialize>(py: Python<'py>, v: &S) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(v).map_err(|e| py_err(e.into()))?;
    json_to_py(py, &v)
}

fn image(data: Vec<f32>, height: usize, width: usize) -> PyResult<Tensor<f32>> {
    Tensor::new(vec![3, height, width], data).map_err(py_err)
}

fn slices(cache: &str, case_ids: Vec<String>) -> PyResult<Vec<SlicePair>> {
    store::load_slices(&PathBuf::from(cache), &case_ids).map_err(py_err)
}

/// AXUNet weights and architecture.
#[pyclass(name = "Model", module = "axunet_py")]
struct PyModel {
    inner: Model<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (width_multiplier=0.125, middle_repeats=1, attention_reduction=8, combine_mode="concat", attention_enabled=true, seed=0))]
    fn new(
        width_multiplier: f64,
        middle_repeats: usize,
        attention_reduction: usize,
        combine_mode: &str,
        attention_enabled: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let combine_mode = match combine_mode {
            "concat" => CombineMode::Concat,
            "add" => CombineMode::Add,
            other => return Err(PyValueError::new_err(format!("E_CONFIG: unknown combine_mode {other:?}"))),
        };
        let cfg = ModelConfig { width_multiplier, middle_repeats, attention_reduction, combine_mode, attention_enabled };
        Ok(PyModel { inner: Model::new(cfg, seed).map_err(py_err)? })
    }

    /// Loads the weights of a checkpoint directory.
    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        Ok(PyModel { inner: Checkpoint::load(&PathBuf::from(dir)).map_err(py_err)?.model })
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        Checkpoint::new(self.inner.clone()).save(&PathBuf::from(dir)).map_err(py_err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.config())
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params.names().map(str::to_string).collect()
    }

    fn num_params(&self) -> usize {
        self.inner.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Raw `[3,H,W]` logits for one `[3,H,W]` image.
    fn logits(&self, data: Vec<f32>, height: usize, width: usize) -> PyResult<Vec<f32>> {
        let x = image(data, height, width)?.reshape(vec![1, 3, height, width]).map_err(py_err)?;
        Ok(self.inner.logits(&x).map_err(py_err)?.into_data())
    }

    /// Thresholded `(wt, tc, et)` masks.
    #[pyo3(signature = (data, height, width, threshold=0.5))]
    fn predict(&self, data: Vec<f32>, height: usize, width: usize, threshold: f64) -> PyResult<(Vec<u8>, Vec<u8>, Vec<u8>)> {
        let x = image(data, height, width)?.reshape(vec![1, 3, height, width]).map_err(py_err)?;
        let logits = self.inner.logits(&x).map_err(py_err)?;
        let m = predict_masks(&logits, threshold).map_err(py_err)?.remove(0);
        Ok((m.wt, m.tc, m.et))
    }

    /// Grad-CAM heatmap in `[0,1]` at input resolution.
    #[pyo3(signature = (data, height, width, layer="final_conv", region="wt"))]
    fn gradcam(&self, data: Vec<f32>, height: usize, width: usize, layer: &str, region: &str) -> PyResult<Vec<f32>> {
        let region = Region::from_str(region).map_err(py_err)?;
        let req = GradCamRequest::new(gradcam::resolve_layer(layer), region);
        let h = gradcam::gradcam(&self.inner, &image(data, height, width)?, &req).map_err(py_err)?;
        Ok(h.values)
    }

    /// Per-case and mean Dice on cached slices.
    #[pyo3(signature = (cache_dir, case_ids, batch_size=8))]
    fn evaluate<'py>(&self, py: Python<'py>, cache_dir: &str, case_ids: Vec<String>, batch_size: usize) -> PyResult<Bound<'py, PyAny>> {
        let set = slices(cache_dir, case_ids)?;
        to_py(py, &tr::evaluate(&self.inner, &set, batch_size).map_err(py_err)?)
    }

    /// Trains in place on cached slices and keeps the best weights.
    /// Returns the per-epoch history.
    #[pyo3(signature = (cache_dir, train_ids, val_ids, lr0=1e-4, epochs=40, batch_size=8, seed=0, augment=true, checkpoint_dir=None))]
    #[allow(clippy::too_many_arguments)]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        cache_dir: &str,
        train_ids: Vec<String>,
        val_ids: Vec<String>,
        lr0: f64,
        epochs: usize,
        batch_size: usize,
        seed: u64,
        augment: bool,
        checkpoint_dir: Option<String>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let (train_set, val_set) = (slices(cache_dir, train_ids)?, slices(cache_dir, val_ids)?);
        let cfg = TrainConfig { lr0, epochs, batch_size, seed, augment, checkpoint_dir: checkpoint_dir.map(PathBuf::from), ..TrainConfig::default() };
        let out = tr::train(self.inner.clone(), &train_set, &val_set, &cfg, |_| {}).map_err(py_err)?;
        self.inner = out.best.model;
        to_py(py, &out.history)
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!("Model(width_multiplier={}, middle_repeats={}, params={})", c.width_multiplier, c.middle_repeats, self.num_params())
    }
}

/// Writes a synthetic dataset and returns per-case statistics.
#[pyfunction]
#[pyo3(signature = (root, cases, dims=(64, 64, 24), seed=0))]
fn synth_generate<'py>(py: Python<'py>, root: &str, cases: usize, dims: (usize, usize, usize), seed: u64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &data::synth_generate(&PathBuf::from(root), cases, dims, seed).map_err(py_err)?)
}

#[pyfunction]
fn list_cases(root: &str) -> PyResult<Vec<String>> {
    store::list_cases(&PathBuf::from(root)).map_err(py_err)
}

/// Preprocesses one stored case into `(slice, image, (wt, tc, et))` tuples.
#[pyfunction]
#[pyo3(signature = (root, case_id, size=(224, 224), threshold=data::DEFAULT_TUMOR_THRESHOLD))]
#[allow(clippy::type_complexity)]
fn preprocess_case(root: &str, case_id: &str, size: (usize, usize), threshold: f64) -> PyResult<Vec<(usize, Vec<f32>, (Vec<u8>, Vec<u8>, Vec<u8>))>> {
    let v = store::read_case(&PathBuf::from(root), case_id).map_err(py_err)?;
    let opts = PreprocessOptions { size, tumor_threshold: threshold, ..Default::default() };
    let pairs = data::preprocess_volume(&v, &opts).map_err(py_err)?;
    Ok(pairs.into_iter().map(|p| (p.slice, p.image.into_data(), (p.mask.wt, p.mask.tc, p.mask.et))).collect())
}

#[pyfunction]
fn dice_score(pred: Vec<u8>, truth: Vec<u8>) -> PyResult<f64> {
    tr::dice_score(&pred, &truth).map_err(py_err)
}

#[pyfunction]
fn cosine_lr(epoch: usize, epochs: usize, lr0: f64) -> PyResult<f64> {
    tr::cosine_lr(epoch, epochs, lr0).map_err(py_err)
}

/// Runs a command-line invocation such as `["train", "--config", "run.json"]`
/// and returns its standard output.
#[pyfunction]
fn run_cli(args: Vec<String>) -> PyResult<String> {
    let cli = Cli::try_parse_from(std::iter::once("axunet".to_string()).chain(args))
        .map_err(|e| PyValueError::new_err(format!("E_CONFIG: {}", e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: "))))?;
    let mut out = Vec::new();
    run(cli, &mut out).map_err(py_err)?;
    Ok(String::from_utf8_lossy(&out).into_owned())
}

#[pymodule]
fn axunet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth_generate, m)?)?;
    m.add_function(wrap_pyfunction!(list_cases, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess_case, m)?)?;
    m.add_function(wrap_pyfunction!(dice_score, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
