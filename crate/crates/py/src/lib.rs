//! Python bindings. Configurations and reports cross the boundary as plain
//! dicts (through the `json` module), images as flat lists in `(C, H, W)`
//! order.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use serde::de::DeserializeOwned;
use serde::Serialize;

use cplsr_core::data::{self, ImageFormat, SynthConfig, SynthSuite};
use cplsr_core::episode::{self, EpisodeConfig, ProtoHead, TrainConfig};
use cplsr_core::error::Error;
use cplsr_core::lsr::{self, LsrConfig};
use cplsr_core::model::{checkpoint, AdapterKind, VitConfig, VitModel};
use cplsr_core::tensor::{RngStream, StreamPurpose, Tensor};
use cplsr_core::verify::{self, GradCheckOptions};

create_exception!(cplsr, CplsrError, PyException, "Base class of every cplsr failure.");
create_exception!(
    cplsr,
    ConfigError,
    CplsrError,
    "Invalid configuration or contract violation (exit code 2)."
);
create_exception!(
    cplsr,
    DataError,
    CplsrError,
    "Unreadable or insufficient data (exit code 3)."
);
create_exception!(
    cplsr,
    NumericError,
    CplsrError,
    "Numeric or verification failure (exit code 4)."
);

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.exit_code() {
        2 => ConfigError::new_err(msg),
        3 => DataError::new_err(msg),
        _ => NumericError::new_err(msg),
    }
}

trait OrRaise<T> {
    fn or_raise(self) -> PyResult<T>;
}

impl<T> OrRaise<T> for cplsr_core::error::Result<T> {
    fn or_raise(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn from_py<T: DeserializeOwned + Default>(obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    let Some(obj) = obj else {
        return Ok(T::default());
    };
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| ConfigError::new_err(e.to_string()))
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| CplsrError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Parse a kebab-case enum name such as `"cp"` or `"sq-euclidean"`.
fn by_name<T: DeserializeOwned>(what: &str, name: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .map_err(|_| ConfigError::new_err(format!("unknown {what} `{name}`")))
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor<f64>> {
    let width = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    if rows.iter().any(|r| r.len() != width) {
        return Err(ConfigError::new_err("rows have different lengths"));
    }
    Tensor::new(vec![rows.len(), width], flat).or_raise()
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let width = t.shape().last().copied().unwrap_or(0).max(1);
    t.data().chunks(width).map(<[f64]>::to_vec).collect()
}

/// A vision transformer with an optional adapter, at 64-bit precision.
#[pyclass(name = "Model", module = "cplsr")]
struct PyModel {
    inner: VitModel<f64>,
}

#[pymethods]
impl PyModel {
    /// `config` overrides fields of the toy geometry; `adapter` is one of
    /// `"cp"`, `"prompts"`, `"frozen"`.
    #[new]
    #[pyo3(signature = (config=None, adapter="cp"))]
    fn new(config: Option<&Bound<'_, PyAny>>, adapter: &str) -> PyResult<Self> {
        let cfg: VitConfig = from_py(config)?;
        let kind: AdapterKind = by_name("adapter", adapter)?;
        Ok(PyModel {
            inner: VitModel::with_kind(cfg, kind).or_raise()?,
        })
    }

    #[getter]
    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.cfg)
    }

    #[getter]
    fn adapter(&self) -> String {
        self.inner.adapter.kind().to_string()
    }

    fn trainable_scalar_count(&self) -> usize {
        self.inner.trainable_scalar_count()
    }

    /// CLS embeddings of model-ready images, one row per image.
    fn embed(&self, py: Python<'_>, images: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let cfg = &self.inner.cfg;
        let shape = [cfg.channels, cfg.image_height, cfg.image_width];
        let tensors = images
            .into_iter()
            .map(|img| Tensor::new(shape.to_vec(), img))
            .collect::<cplsr_core::error::Result<Vec<_>>>()
            .or_raise()?;
        let refs: Vec<&Tensor<f64>> = tensors.iter().collect();
        let emb = py.detach(|| self.inner.embed(&refs)).or_raise()?;
        Ok(rows(&emb))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save(&self.inner, path).or_raise()
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: checkpoint::load(path).or_raise()?,
        })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &checkpoint::to_bytes(&self.inner))
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(PyModel {
            inner: checkpoint::from_bytes(data).or_raise()?,
        })
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.cfg;
        format!(
            "Model(adapter={}, image={}x{}x{}, dim={}, heads={}, depth={})",
            self.inner.adapter.kind(),
            c.channels,
            c.image_height,
            c.image_width,
            c.dim,
            c.heads,
            c.depth
        )
    }
}

/// Labelled images grouped by class.
#[pyclass(name = "Dataset", module = "cplsr")]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (config=None))]
    fn synthetic(config: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let cfg: SynthConfig = from_py(config)?;
        Ok(PyDataset {
            inner: data::synth_dataset(&cfg).or_raise()?,
        })
    }

    #[staticmethod]
    fn load(manifest: &str) -> PyResult<Self> {
        Ok(PyDataset {
            inner: data::load_dataset(manifest).or_raise()?,
        })
    }

    /// Write images and a manifest under `dir`; returns the manifest path.
    #[pyo3(signature = (dir, format="tensor"))]
    fn save(&self, dir: &str, format: &str) -> PyResult<String> {
        let format = match format {
            "tensor" => ImageFormat::Tensor,
            "ppm" => ImageFormat::Ppm,
            other => return Err(ConfigError::new_err(format!("unknown image format `{other}`"))),
        };
        let path = data::save_dataset(&self.inner, dir, format).or_raise()?;
        Ok(path.display().to_string())
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn geometry(&self) -> (usize, usize, usize) {
        self.inner.geometry
    }

    #[getter]
    fn class_ids(&self) -> Vec<u32> {
        self.inner.class_ids()
    }

    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn num_samples(&self) -> usize {
        self.inner.num_samples()
    }

    fn __len__(&self) -> usize {
        self.inner.num_samples()
    }

    /// Raw pixels in `[0, 1]`.
    fn image(&self, class: usize, sample: usize) -> PyResult<Vec<f64>> {
        self.check_index(class, sample)?;
        Ok(self.inner.image(class, sample).data().to_vec())
    }

    /// Normalized pixels, ready for `Model.embed`.
    fn model_input(&self, class: usize, sample: usize) -> PyResult<Vec<f64>> {
        self.check_index(class, sample)?;
        Ok(self.inner.model_input::<f64>(class, sample).data().to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(name={:?}, classes={}, samples={})",
            self.inner.name,
            self.inner.num_classes(),
            self.inner.num_samples()
        )
    }
}

impl PyDataset {
    fn check_index(&self, class: usize, sample: usize) -> PyResult<()> {
        match self.inner.classes.get(class) {
            Some(c) if sample < c.images.len() => Ok(()),
            _ => Err(pyo3::exceptions::PyIndexError::new_err(format!(
                "no sample ({class}, {sample})"
            ))),
        }
    }
}

/// The default synthetic suite: `(base, validation, [targets])`.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn synth_suite(seed: u64) -> PyResult<(PyDataset, PyDataset, Vec<PyDataset>)> {
    let (b, v, t) = SynthSuite::with_seed(seed).generate().or_raise()?;
    let wrap = |inner| PyDataset { inner };
    Ok((wrap(b), wrap(v), t.into_iter().map(wrap).collect()))
}

/// Mean accuracy and 95% half width over `episodes` random episodes.
#[pyfunction]
#[pyo3(signature = (model, dataset, ways=5, shots=1, queries=15, episodes=600, seed=0, head=None))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    py: Python<'_>,
    model: &PyModel,
    dataset: &PyDataset,
    ways: usize,
    shots: usize,
    queries: usize,
    episodes: usize,
    seed: u64,
    head: Option<&Bound<'_, PyAny>>,
) -> PyResult<Py<PyAny>> {
    let head: ProtoHead = from_py(head)?;
    let cfg = EpisodeConfig::new(ways, shots, queries);
    let report = py
        .detach(|| episode::evaluate(&model.inner, &dataset.inner, &cfg, episodes, seed, &head))
        .or_raise()?;
    to_py(py, &report)
}

/// Episodic training of the adapter. `config` and `lsr` override the desk
/// preset and the default augmentation settings.
#[pyfunction]
#[pyo3(signature = (model, base, validation, config=None, lsr=None))]
fn train<'py>(
    py: Python<'py>,
    model: &PyModel,
    base: &PyDataset,
    validation: &PyDataset,
    config: Option<&Bound<'py, PyAny>>,
    lsr: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = match config {
        Some(c) => {
            let mut merged =
                serde_json::to_value(TrainConfig::desk()).map_err(|e| CplsrError::new_err(e.to_string()))?;
            let given: serde_json::Value = from_py(Some(c))?;
            merge(&mut merged, given);
            serde_json::from_value(merged).map_err(|e| ConfigError::new_err(e.to_string()))?
        }
        None => TrainConfig::desk(),
    };
    let lsr: LsrConfig = from_py(lsr)?;
    let start = model.inner.clone();
    let out = py
        .detach(|| episode::train(start, &base.inner, &validation.inner, &cfg, &lsr, |_| {}))
        .or_raise()?;
    let dict = PyDict::new(py);
    dict.set_item("best", PyModel { inner: out.best })?;
    dict.set_item("final", PyModel { inner: out.final_model })?;
    dict.set_item("best_after_episode", out.best_after_episode)?;
    dict.set_item("best_validation", to_py(py, &out.best_validation)?)?;
    dict.set_item("log", to_py(py, &out.log)?)?;
    dict.set_item("validations", to_py(py, &out.validations)?)?;
    Ok(dict)
}

/// Recursive object merge: keys in `patch` replace those in `base`.
fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (slot, value) => *slot = value,
    }
}

/// Symbolic and instrumented multiply-accumulate counts.
#[pyfunction]
#[pyo3(signature = (config=None, adapter="cp"))]
fn flop_count(py: Python<'_>, config: Option<&Bound<'_, PyAny>>, adapter: &str) -> PyResult<Py<PyAny>> {
    let cfg: VitConfig = from_py(config)?;
    let kind: AdapterKind = by_name("adapter", adapter)?;
    to_py(py, &verify::flop_count(&cfg, kind).or_raise()?)
}

/// Finite-difference check of the adapter gradients on one base episode.
#[pyfunction]
#[pyo3(signature = (model, dataset, ways=2, shots=1, queries=1, seed=0, options=None, head=None))]
#[allow(clippy::too_many_arguments)]
fn grad_check(
    py: Python<'_>,
    model: &PyModel,
    dataset: &PyDataset,
    ways: usize,
    shots: usize,
    queries: usize,
    seed: u64,
    options: Option<&Bound<'_, PyAny>>,
    head: Option<&Bound<'_, PyAny>>,
) -> PyResult<Py<PyAny>> {
    let opts: GradCheckOptions = from_py(options)?;
    let head: ProtoHead = from_py(head)?;
    let mut rng = RngStream::new(seed).derive(StreamPurpose::Verify, 0);
    let episode =
        episode::sample_episode(&dataset.inner, &EpisodeConfig::new(ways, shots, queries), &mut rng).or_raise()?;
    let report = py
        .detach(|| verify::grad_check_model(&model.inner, &dataset.inner, &episode, &head, &opts))
        .or_raise()?;
    to_py(py, &report)
}

/// Largest CLS difference between the adapted model and its frozen backbone.
#[pyfunction]
#[pyo3(signature = (model, batches=16, batch_size=4, seed=0))]
fn baseline_equivalence(
    py: Python<'_>,
    model: &PyModel,
    batches: usize,
    batch_size: usize,
    seed: u64,
) -> PyResult<f64> {
    py.detach(|| verify::check_baseline_equivalence(&model.inner, batches, batch_size, seed))
        .or_raise()
}

/// Mean cross-entropy of queries against prototypes, computed by the engine.
#[pyfunction]
#[pyo3(signature = (queries, prototypes, labels, metric="sq-euclidean", temperature=1.0))]
fn proto_loss(
    queries: Vec<Vec<f64>>,
    prototypes: Vec<Vec<f64>>,
    labels: Vec<usize>,
    metric: &str,
    temperature: f64,
) -> PyResult<f64> {
    let metric = by_name("metric", metric)?;
    let logits = episode::proto_logits(&matrix(&queries)?, &matrix(&prototypes)?, metric, temperature).or_raise()?;
    episode::episode_loss(&logits, &labels).or_raise()
}

/// The same loss from the independent scalar reference.
#[pyfunction]
#[pyo3(signature = (queries, prototypes, labels, metric="sq-euclidean", temperature=1.0))]
fn proto_oracle(
    queries: Vec<Vec<f64>>,
    prototypes: Vec<Vec<f64>>,
    labels: Vec<usize>,
    metric: &str,
    temperature: f64,
) -> PyResult<f64> {
    let metric = by_name("metric", metric)?;
    if labels.len() != queries.len() || labels.iter().any(|&l| l >= prototypes.len()) {
        return Err(ConfigError::new_err("labels must index prototypes, one per query"));
    }
    Ok(verify::proto_oracle(
        &queries,
        &prototypes,
        &labels,
        metric,
        temperature,
    ))
}

/// Counterclockwise quarter turns of a flat `(C, H, H)` image.
#[pyfunction]
fn rotate90(image: Vec<f64>, shape: (usize, usize, usize), k: i64) -> PyResult<Vec<f64>> {
    let t = Tensor::new(vec![shape.0, shape.1, shape.2], image).or_raise()?;
    Ok(lsr::rotate90(&t, k).or_raise()?.data().to_vec())
}

/// Run the command-line tool in-process; returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv = std::iter::once("cplsr".to_string()).chain(args);
    py.detach(|| cplsr_core::cli::main_with_args(argv))
}

#[pymodule]
fn cplsr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("CplsrError", py.get_type::<CplsrError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add("NumericError", py.get_type::<NumericError>())?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(synth_suite, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(flop_count, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(baseline_equivalence, m)?)?;
    m.add_function(wrap_pyfunction!(proto_loss, m)?)?;
    m.add_function(wrap_pyfunction!(proto_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(rotate90, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
