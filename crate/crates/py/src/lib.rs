//! Python bindings: fixtures, training, evaluation, embedding, ranking and
//! the scalar losses.

use std::path::PathBuf;

use candle_core::{Device, Tensor};
use indivaid::datasets::{scan_dataset, DatasetSummary};
use indivaid::encoders::FeatureVector;
use indivaid::evalmetrics::{evaluate, rank_gallery};
use indivaid::losses;
use indivaid::synthetic::{generate, FixtureSpec};
use indivaid::train::{
    evaluate_encoders, load_images, embed_images, run_baseline, run_stage1, run_stage2, Mode, Model,
    RunOutputs, TrainConfig, TrainData,
};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyFloat, PyInt, PyList, PyString};

fn err(e: indivaid::Error) -> PyErr {
    let msg = format!("{}: {}", e.kind(), e.message());
    if e.is_input_error() {
        PyValueError::new_err(msg)
    } else {
        PyRuntimeError::new_err(msg)
    }
}

fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn to_toml(value: &Bound<'_, PyAny>) -> PyResult<toml::Value> {
    if value.is_instance_of::<PyBool>() {
        Ok(toml::Value::Boolean(value.extract()?))
    } else if value.is_instance_of::<PyInt>() {
        Ok(toml::Value::Integer(value.extract()?))
    } else if value.is_instance_of::<PyFloat>() {
        Ok(toml::Value::Float(value.extract()?))
    } else if value.is_instance_of::<PyString>() {
        Ok(toml::Value::String(value.extract()?))
    } else if let Ok(list) = value.cast::<PyList>() {
        list.iter().map(|v| to_toml(&v)).collect::<PyResult<_>>().map(toml::Value::Array)
    } else if let Ok(dict) = value.cast::<PyDict>() {
        let mut table = toml::Table::new();
        for (k, v) in dict.iter() {
            table.insert(k.extract()?, to_toml(&v)?);
        }
        Ok(toml::Value::Table(table))
    } else {
        Err(PyValueError::new_err(format!("unsupported config value {value}")))
    }
}

fn merge(into: &mut toml::Table, key: String, value: toml::Value) {
    match (into.get_mut(&key), value) {
        (Some(toml::Value::Table(old)), toml::Value::Table(new)) => {
            for (k, v) in new {
                merge(old, k, v);
            }
        }
        (_, value) => {
            into.insert(key, value);
        }
    }
}

/// Training configuration; edit it with `update(**fields)`.
#[pyclass(name = "TrainConfig", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    /// Toy-backend settings by default; `toy=False` gives the full-scale ones.
    #[new]
    #[pyo3(signature = (stage = 1, toy = true))]
    fn new(stage: u8, toy: bool) -> Self {
        let inner = if toy {
            TrainConfig::toy(stage)
        } else {
            TrainConfig {
                stage,
                ..TrainConfig::default()
            }
        };
        Self { inner }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = TrainConfig::from_toml_str(text).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(err)
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner)
    }

    fn hash(&self) -> PyResult<String> {
        self.inner.hash().map_err(err)
    }

    /// Sets fields by name; nested dicts update tables such as `encoder`.
    /// The result is validated before anything changes.
    #[pyo3(signature = (**fields))]
    fn update(&mut self, fields: Option<&Bound<'_, PyDict>>) -> PyResult<()> {
        let Some(fields) = fields else { return Ok(()) };
        let mut table: toml::Table = toml::from_str(&self.to_toml()?)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        for (k, v) in fields.iter() {
            merge(&mut table, k.extract()?, to_toml(&v)?);
        }
        let text = toml::to_string(&table).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        *self = Self::from_toml(&text)?;
        Ok(())
    }

    #[getter]
    fn stage(&self) -> u8 {
        self.inner.stage
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.mode.to_string()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    fn __repr__(&self) -> String {
        format!(
            "TrainConfig(stage={}, mode={}, epochs={}, seed={})",
            self.inner.stage, self.inner.mode, self.inner.epochs, self.inner.seed
        )
    }
}

fn train_data(data: &PathBuf, image_size: usize) -> PyResult<(indivaid::datasets::Dataset, TrainData)> {
    let ds = scan_dataset(data).map_err(err)?;
    let td = TrainData::load(&ds, image_size).map_err(err)?;
    Ok((ds, td))
}

/// Encoders plus whatever a run has trained so far.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// Untrained model for the train identities under `data`.
    #[staticmethod]
    fn init(config: &PyTrainConfig, data: PathBuf) -> PyResult<Self> {
        let (_, td) = train_data(&data, config.inner.encoder.image_size)?;
        let inner = Model::init(&config.inner, td.identities).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Model::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<PathBuf> {
        self.inner.save(&path).map_err(err)
    }

    /// Runs the stage and mode named in `config`; returns the training report,
    /// or `None` for `clip_zs`.
    #[pyo3(signature = (config, data, checkpoint_dir = None, log_path = None))]
    fn train(
        &mut self,
        py: Python<'_>,
        config: &PyTrainConfig,
        data: PathBuf,
        checkpoint_dir: Option<PathBuf>,
        log_path: Option<PathBuf>,
    ) -> PyResult<Option<Py<PyAny>>> {
        let c = &config.inner;
        let (_, td) = train_data(&data, c.encoder.image_size)?;
        let out = RunOutputs {
            checkpoint_dir,
            log_path,
        };
        let model = &mut self.inner;
        let report = py
            .detach(|| match (c.mode, c.stage) {
                (Mode::Indivaid, 1) => run_stage1(c, &td, model, &out).map(Some),
                (Mode::Indivaid, _) => run_stage2(c, &td, model, &out).map(Some),
                _ => run_baseline(c, &td, model, &out),
            })
            .map_err(err)?;
        report.map(|mut r| {
            r.log.clear();
            to_py(py, &r)
        })
        .transpose()
    }

    /// Gallery/query retrieval metrics on the dataset at `data`.
    fn evaluate(&self, py: Python<'_>, data: PathBuf) -> PyResult<Py<PyAny>> {
        let ds = scan_dataset(&data).map_err(err)?;
        let report = py.detach(|| evaluate_encoders(&self.inner.encoders, &ds)).map_err(err)?;
        to_py(py, &report.to_file())
    }

    /// Unit-norm embeddings of the given image files.
    fn embed(&self, py: Python<'_>, paths: Vec<PathBuf>) -> PyResult<Vec<Vec<f64>>> {
        let encoders = &self.inner.encoders;
        py.detach(|| {
            let records: Vec<_> = paths
                .iter()
                .map(|p| indivaid::datasets::ImageRecord {
                    path: p.clone(),
                    identity: 0,
                    split: indivaid::datasets::Split::Query,
                    source_id: String::new(),
                })
                .collect();
            let images = load_images(&records, encoders.config().image_size)?;
            Ok(embed_images(encoders, &images)?.into_iter().map(|f| f.values).collect())
        })
        .map_err(err)
    }

    fn checksums(&self) -> PyResult<std::collections::BTreeMap<String, String>> {
        self.inner.checksums().map_err(err)
    }

    #[getter]
    fn stage(&self) -> u8 {
        self.inner.stage
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.mode.to_string()
    }

    #[getter]
    fn identities(&self) -> Vec<String> {
        self.inner.identities.clone()
    }

    #[getter]
    fn epochs_completed(&self) -> usize {
        self.inner.epochs_completed
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.encoders.config().embed_dim
    }

    #[getter]
    fn logit_scale(&self) -> PyResult<f64> {
        self.inner.temperature.value().map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(stage={}, mode={}, identities={})",
            self.inner.stage,
            self.inner.mode,
            self.inner.identities.len()
        )
    }
}

/// Writes a synthetic dataset (`kind` is "small" or "standard") and returns
/// its summary.
#[pyfunction]
#[pyo3(signature = (root, kind = "small", seed = None))]
fn generate_fixture(py: Python<'_>, root: PathBuf, kind: &str, seed: Option<u64>) -> PyResult<Py<PyAny>> {
    let mut spec = match kind {
        "small" => FixtureSpec::small(),
        "standard" => FixtureSpec::standard(),
        other => return Err(PyValueError::new_err(format!("unknown fixture kind '{other}'"))),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    generate(&root, &spec).map_err(err)?;
    scan(py, root)
}

/// Validates the directory layout and returns split/identity counts.
#[pyfunction]
fn scan(py: Python<'_>, root: PathBuf) -> PyResult<Py<PyAny>> {
    let ds = scan_dataset(&root).map_err(err)?;
    to_py(py, &DatasetSummary::from_dataset(&ds))
}

/// Per query: gallery indices by descending cosine similarity and their scores.
#[pyfunction]
#[pyo3(signature = (queries, gallery, top = None))]
fn rank(queries: Vec<Vec<f64>>, gallery: Vec<Vec<f64>>, top: Option<usize>) -> PyResult<Vec<(Vec<usize>, Vec<f64>)>> {
    let ranked = rank_gallery(&queries, &gallery).map_err(err)?;
    let k = top.unwrap_or(usize::MAX);
    Ok(ranked
        .into_iter()
        .map(|r| {
            let n = k.min(r.ordered_gallery.len());
            (r.ordered_gallery[..n].to_vec(), r.scores[..n].to_vec())
        })
        .collect())
}

/// mAP and CMC for precomputed features.
#[pyfunction]
fn evaluate_features(
    py: Python<'_>,
    queries: Vec<Vec<f64>>,
    query_labels: Vec<usize>,
    gallery: Vec<Vec<f64>>,
    gallery_labels: Vec<usize>,
) -> PyResult<Py<PyAny>> {
    let report = evaluate(&queries, &query_labels, &gallery, &gallery_labels).map_err(err)?;
    to_py(py, &report.to_file())
}

#[pyfunction]
fn cosine_sim(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    losses::cosine_sim(&FeatureVector::new(a), &FeatureVector::new(b)).map_err(err)
}

#[pyfunction]
fn triplet_hinge(d_p: f64, d_n: f64, tau: f64) -> f64 {
    losses::triplet_hinge(d_p, d_n, tau)
}

#[pyfunction]
fn smoothed_targets(y: usize, n: usize, epsilon: f64) -> PyResult<Vec<f64>> {
    Ok(losses::smoothed_targets(y, n, epsilon).map_err(err)?.q)
}

/// Label-smoothed cross-entropy of `logits` (`B × N`), averaged over rows.
#[pyfunction]
fn identity_loss(logits: Vec<Vec<f64>>, labels: Vec<usize>, epsilon: f64) -> PyResult<f64> {
    let n = logits.first().map_or(0, Vec::len);
    if n == 0 || logits.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("logits must be a non-empty rectangular matrix"));
    }
    let b = logits.len();
    let flat: Vec<f64> = logits.into_iter().flatten().collect();
    let t = Tensor::from_vec(flat, (b, n), &Device::Cpu).map_err(|e| err(e.into()))?;
    let loss = losses::identity_loss(&t, &labels, epsilon).map_err(err)?;
    loss.to_scalar::<f64>().map_err(|e| err(e.into()))
}

#[pymodule]
pub fn indivaid_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_fixture, m)?)?;
    m.add_function(wrap_pyfunction!(scan, m)?)?;
    m.add_function(wrap_pyfunction!(rank, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_features, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_sim, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_hinge, m)?)?;
    m.add_function(wrap_pyfunction!(smoothed_targets, m)?)?;
    m.add_function(wrap_pyfunction!(identity_loss, m)?)?;
    Ok(())
}
