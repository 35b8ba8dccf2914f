//! Python bindings: fusion algebra, special functions, scene generation,
//! training, evaluation and inference.
//!
//! Structured results (reports, histories, configs) cross the boundary as
//! JSON and surface in Python as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use usnet::config::{GenConfigFile, TrainConfigFile};
use usnet::io::{read_dataset, write_dataset};
use usnet::metrics::{evaluate as evaluate_model, max_f_measure as max_f, predict_tensors};
use usnet::model::{AblationMode, Modality};
use usnet::sl::{fuse_evidence as fuse_maps, fuse_opinions as fuse_pair, EvidenceMap, Opinion as CoreOpinion};
use usnet::synth::{generate_dataset as synth_dataset, generate_scene as synth_scene, SceneConfig, SceneSample};
use usnet::train::{train_to_files, Checkpoint, HistoryRecord};
use usnet::Tensor;

fn to_py_err(e: usnet::Error) -> PyErr {
    let msg = e.to_string();
    match e {
        usnet::Error::Io { .. } | usnet::Error::Format { .. } => PyOSError::new_err(msg),
        usnet::Error::Numeric(_) => PyArithmeticError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

trait OrPy<T> {
    fn or_py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for usnet::Result<T> {
    fn or_py(self) -> PyResult<T> {
        self.map_err(to_py_err)
    }
}

/// Converts a serializable value into Python objects via JSON.
fn to_python<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Accepts a JSON string or any JSON-serializable Python object.
fn json_bytes(obj: &Bound<'_, PyAny>) -> PyResult<Vec<u8>> {
    if let Ok(text) = obj.extract::<String>() {
        return Ok(text.into_bytes());
    }
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    Ok(text.into_bytes())
}

#[pyfunction]
fn digamma(x: f64) -> PyResult<f64> {
    usnet::special::digamma(x).or_py()
}

#[pyfunction]
fn trigamma(x: f64) -> PyResult<f64> {
    usnet::special::trigamma(x).or_py()
}

#[pyfunction]
fn lgamma(x: f64) -> PyResult<f64> {
    usnet::special::lgamma(x).or_py()
}

/// A binary opinion: belief in (non-road, road) and uncertainty.
#[pyclass(frozen, skip_from_py_object, name = "Opinion")]
#[derive(Clone, Copy)]
struct PyOpinion(CoreOpinion);

#[pymethods]
impl PyOpinion {
    #[new]
    fn new(belief: [f64; 2], uncertainty: f64) -> Self {
        PyOpinion(CoreOpinion { belief, uncertainty })
    }

    #[staticmethod]
    fn from_evidence(e0: f64, e1: f64) -> PyResult<Self> {
        if !(e0 >= 0.0 && e1 >= 0.0 && e0.is_finite() && e1.is_finite()) {
            return Err(PyValueError::new_err("evidence must be finite and non-negative"));
        }
        Ok(PyOpinion(CoreOpinion::from_evidence(e0, e1)))
    }

    #[getter]
    fn belief(&self) -> (f64, f64) {
        (self.0.belief[0], self.0.belief[1])
    }

    #[getter]
    fn uncertainty(&self) -> f64 {
        self.0.uncertainty
    }

    fn __repr__(&self) -> String {
        format!("Opinion(belief=({}, {}), uncertainty={})", self.0.belief[0], self.0.belief[1], self.0.uncertainty)
    }
}

/// Fuses two opinions; returns a dict with belief, uncertainty, conflict,
/// alpha, strength and probability.
#[pyfunction]
fn fuse_opinions<'py>(py: Python<'py>, a: &PyOpinion, b: &PyOpinion) -> PyResult<Bound<'py, PyDict>> {
    let f = fuse_pair(a.0, b.0);
    let d = PyDict::new(py);
    d.set_item("belief", (f.opinion.belief[0], f.opinion.belief[1]))?;
    d.set_item("uncertainty", f.opinion.uncertainty)?;
    d.set_item("conflict", f.conflict)?;
    d.set_item("alpha", (f.alpha[0], f.alpha[1]))?;
    d.set_item("strength", f.strength)?;
    d.set_item("probability", f.probability)?;
    Ok(d)
}

/// Fuses two `height × width × 2` evidence grids given as flat row-major
/// sequences with the class index fastest.
#[pyfunction]
fn fuse_evidence(py: Python<'_>, a: Vec<f64>, b: Vec<f64>, height: usize, width: usize) -> PyResult<Py<PyAny>> {
    let ea = EvidenceMap::new(height, width, 2, a).or_py()?;
    let eb = EvidenceMap::new(height, width, 2, b).or_py()?;
    let fused = fuse_maps(&ea, &eb).or_py()?;
    let d = PyDict::new(py);
    d.set_item("belief", fused.assignment.belief)?;
    d.set_item("uncertainty", fused.assignment.uncertainty)?;
    d.set_item("conflict", fused.conflict)?;
    d.set_item("alpha", fused.alpha.alpha)?;
    d.set_item("strength", fused.alpha.strength)?;
    d.set_item("probability", fused.probability)?;
    Ok(d.into_any().unbind())
}

fn scene_config(config: Option<&Bound<'_, PyAny>>) -> PyResult<SceneConfig> {
    let cfg = match config {
        None => SceneConfig::default(),
        Some(obj) => serde_json::from_slice(&json_bytes(obj)?).map_err(|e| PyValueError::new_err(format!("scene config: {e}")))?,
    };
    cfg.validate().or_py()?;
    Ok(cfg)
}

/// One rendered scene; images are flat row-major with interleaved channels.
#[pyclass(frozen, name = "Scene")]
struct PyScene(SceneSample);

#[pymethods]
impl PyScene {
    #[getter]
    fn height(&self) -> usize {
        self.0.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width
    }

    #[getter]
    fn appearance(&self) -> Vec<f64> {
        self.0.appearance.clone()
    }

    #[getter]
    fn range(&self) -> Vec<f64> {
        self.0.range.clone()
    }

    #[getter]
    fn mask(&self) -> Vec<u8> {
        self.0.mask.clone()
    }

    #[getter]
    fn corrupt_a(&self) -> Vec<u8> {
        self.0.corrupt_a.clone()
    }

    #[getter]
    fn corrupt_b(&self) -> Vec<u8> {
        self.0.corrupt_b.clone()
    }

    fn road_fraction(&self) -> f64 {
        self.0.road_fraction()
    }

    fn __repr__(&self) -> String {
        format!("Scene({}x{})", self.0.height, self.0.width)
    }
}

/// Renders the scene for `seed`; `config` overrides scene parameters.
#[pyfunction]
#[pyo3(signature = (seed, config=None))]
fn generate_scene(seed: u64, config: Option<&Bound<'_, PyAny>>) -> PyResult<PyScene> {
    Ok(PyScene(synth_scene(&scene_config(config)?, seed).or_py()?))
}

/// Writes `n` scenes from seeds `seed..seed+n` as a dataset directory.
#[pyfunction]
#[pyo3(signature = (out, n, seed, config=None))]
fn generate_dataset(py: Python<'_>, out: PathBuf, n: usize, seed: u64, config: Option<&Bound<'_, PyAny>>) -> PyResult<()> {
    let cfg = match config {
        Some(obj) => GenConfigFile::parse(&json_bytes(obj)?).or_py()?.scene,
        None => GenConfigFile::default().scene,
    };
    py.detach(|| {
        let samples = synth_dataset(&cfg, n, seed)?;
        write_dataset(&out, &cfg, seed, &samples)
    })
    .or_py()
}

/// Trains on a dataset directory and writes the checkpoint and JSON-lines
/// history; returns the history as a list of dicts.
#[pyfunction]
#[pyo3(signature = (data, out, config=None, ablation=None, seed=None, history=None))]
fn train(
    py: Python<'_>,
    data: PathBuf,
    out: PathBuf,
    config: Option<&Bound<'_, PyAny>>,
    ablation: Option<&str>,
    seed: Option<u64>,
    history: Option<PathBuf>,
) -> PyResult<Py<PyAny>> {
    let mut file = match config {
        Some(obj) => TrainConfigFile::parse(&json_bytes(obj)?).or_py()?,
        None => TrainConfigFile::default(),
    };
    if let Some(mode) = ablation {
        file.train.ablation = AblationMode::parse(mode).or_py()?;
    }
    if let Some(seed) = seed {
        file.train.seed = seed;
    }
    let history = history.unwrap_or_else(|| usnet::cli::default_history_path(&out));
    let records: Vec<HistoryRecord> = py
        .detach(|| {
            let (_, samples) = read_dataset(&data)?;
            train_to_files(&file.train, &file.model, &samples, &out, &history).map(|o| o.history)
        })
        .or_py()?;
    to_python(py, &records)
}

/// Scores a checkpoint on a dataset directory; returns the metrics report.
#[pyfunction]
fn evaluate(py: Python<'_>, model: PathBuf, data: PathBuf) -> PyResult<Py<PyAny>> {
    let report = py
        .detach(|| {
            let ckpt = Checkpoint::load(&model)?;
            let (_, samples) = read_dataset(&data)?;
            evaluate_model(&ckpt.arch, &ckpt.params, &samples)
        })
        .or_py()?;
    to_python(py, &report)
}

/// Pooled maximum F-measure over images; probabilities and masks are lists
/// of flat per-image sequences.
#[pyfunction]
fn max_f_measure(py: Python<'_>, probabilities: Vec<Vec<f64>>, masks: Vec<Vec<u8>>) -> PyResult<Py<PyAny>> {
    let p: Vec<&[f64]> = probabilities.iter().map(Vec::as_slice).collect();
    let m: Vec<&[u8]> = masks.iter().map(Vec::as_slice).collect();
    to_python(py, &max_f(&p, &m, None).or_py()?)
}

/// A trained network loaded from a checkpoint.
#[pyclass(frozen, name = "Model")]
struct PyModel(Checkpoint);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel(Checkpoint::load(&path).or_py()?))
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.0.arch.mode.name()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.0.params.scalar_count()
    }

    /// Runs one image pair, each a flat `height × width × 3` sequence with
    /// interleaved channels. Returns road probability, combined uncertainty
    /// and per-modality uncertainty maps.
    fn predict<'py>(
        &self,
        py: Python<'py>,
        appearance: Vec<f64>,
        range: Vec<f64>,
        height: usize,
        width: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let planar = |hwc: &[f64], what: &str| -> PyResult<Tensor> {
            if hwc.len() != height * width * 3 {
                return Err(PyValueError::new_err(format!(
                    "{what} has {} values, expected {height}x{width}x3",
                    hwc.len()
                )));
            }
            let plane = height * width;
            Ok(Tensor::from_fn(&[1, 3, height, width], |i| hwc[3 * (i % plane) + i / plane]))
        };
        let (a, r) = (planar(&appearance, "appearance")?, planar(&range, "range")?);
        let ckpt = &self.0;
        let pred = py.detach(|| predict_tensors(&ckpt.arch, &ckpt.params, a, r)).or_py()?.remove(0);
        let d = PyDict::new(py);
        d.set_item("probability", pred.probability)?;
        d.set_item("combined_uncertainty", pred.combined_uncertainty)?;
        let u = PyDict::new(py);
        for m in [Modality::Rgb, Modality::Depth] {
            if let Some(map) = pred.uncertainty.get(&m) {
                u.set_item(m.name(), map.clone())?;
            }
        }
        d.set_item("uncertainty", u)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!("Model(mode={}, parameters={})", self.mode(), self.parameter_count())
    }
}

/// Runs the built-in checks; returns `(name, passed, detail)` tuples.
#[pyfunction]
fn selftest() -> PyResult<Vec<(String, bool, String)>> {
    let checks = usnet::selftest::run().or_py()?;
    Ok(checks.into_iter().map(|c| (c.name.to_string(), c.passed, c.detail)).collect())
}

#[pymodule]
fn usnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyOpinion>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(digamma, m)?)?;
    m.add_function(wrap_pyfunction!(trigamma, m)?)?;
    m.add_function(wrap_pyfunction!(lgamma, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_opinions, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_evidence, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(max_f_measure, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
