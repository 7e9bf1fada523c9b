//! Python bindings. Configurations cross the boundary as JSON-compatible
//! dicts and come back the same way.

use std::path::PathBuf;

use engine::data::{generate_dataset, load_manifest, write_dataset, Mask, SyntheticTaskSpec};
use engine::sweep::{linear_fit, run_study, SamplerKind, SearchSpace, StudyState, TrainingObjective};
use engine::training::{self, TrainRunConfig, TrainedArtifacts};
use engine::{checkpoint, BackboneConfig, Error, StrategyKind};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(promptseg, FreezeViolation, PyException);
create_exception!(promptseg, PromptsegError, PyException);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Tokenize(_) | Error::Json(_) => PyValueError::new_err(e.to_string()),
        Error::FreezeViolation(_) => FreezeViolation::new_err(e.to_string()),
        _ => PromptsegError::new_err(e.to_string()),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned + Default>(py: Python<'_>, obj: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let Some(obj) = obj else { return Ok(T::default()) };
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn kind(name: &str) -> PyResult<StrategyKind> {
    name.parse().map_err(py_err)
}

#[pyclass(module = "promptseg", frozen)]
struct Backbone {
    inner: engine::Backbone,
}

#[pymethods]
impl Backbone {
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(py: Python<'_>, config: Option<&Bound<'_, PyDict>>, seed: u64) -> PyResult<Self> {
        let cfg: BackboneConfig = from_py(py, config)?;
        Ok(Self {
            inner: engine::Backbone::new(cfg, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load_backbone(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save_backbone(&path, &self.inner).map_err(py_err)
    }

    fn checksum(&self) -> String {
        format!("{:016x}", self.inner.checksum())
    }

    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.config)
    }

    fn max_depth(&self, strategy: &str) -> PyResult<usize> {
        Ok(kind(strategy)?.max_depth(&self.inner.config))
    }
}

#[pyclass(module = "promptseg", frozen)]
struct Dataset {
    inner: engine::data::Dataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    #[pyo3(signature = (spec=None))]
    fn generate(py: Python<'_>, spec: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let spec: SyntheticTaskSpec = from_py(py, spec)?;
        Ok(Self {
            inner: generate_dataset(&spec).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(manifest: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_manifest(&manifest).map_err(py_err)?,
        })
    }

    fn write(&self, dir: PathBuf) -> PyResult<PathBuf> {
        write_dataset(&dir, &self.inner).map_err(py_err)
    }

    fn sizes(&self) -> (usize, usize, usize) {
        (self.inner.train.len(), self.inner.val.len(), self.inner.test.len())
    }

    fn phrases(&self) -> Vec<String> {
        self.inner.train.iter().map(|s| s.phrase.clone()).collect()
    }
}

#[pyclass(module = "promptseg", frozen)]
struct TrainResult {
    inner: TrainedArtifacts,
    config: TrainRunConfig,
}

#[pymethods]
impl TrainResult {
    #[getter]
    fn metrics(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.metrics)
    }

    #[getter]
    fn step_losses(&self) -> Vec<f64> {
        self.inner.step_losses.clone()
    }

    #[getter]
    fn final_dice(&self) -> Option<f64> {
        self.inner.final_dice()
    }

    #[getter]
    fn backbone_checksum(&self) -> String {
        format!("{:016x}", self.inner.backbone_checksum)
    }

    fn trainable_parameter_count(&self) -> usize {
        engine::prompts::trainable_parameters(&self.inner.state)
            .iter()
            .map(|p| p.tensor.numel())
            .sum()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let bytes = self.inner.checkpoint_bytes(&self.config).map_err(py_err)?;
        std::fs::write(&path, bytes).map_err(|e| py_err(e.into()))
    }

    /// Mean dice on one split ("train", "val" or "test").
    fn score(&self, backbone: &Backbone, dataset: &Dataset, split: &str) -> PyResult<f64> {
        let samples = match split {
            "train" => &dataset.inner.train,
            "val" => &dataset.inner.val,
            "test" => &dataset.inner.test,
            other => return Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        };
        let prepared = training::prepare(&backbone.inner, samples, &self.inner.normalization).map_err(py_err)?;
        training::evaluate(&backbone.inner, &self.inner.state, &prepared).map_err(py_err)
    }
}

#[pyfunction]
fn strategies() -> Vec<String> {
    StrategyKind::ALL.iter().map(|k| k.to_string()).collect()
}

/// Train a prompt configuration on the training split; the backbone is not modified.
#[pyfunction]
#[pyo3(signature = (backbone, dataset, config=None))]
fn train(
    py: Python<'_>,
    backbone: &Backbone,
    dataset: &Dataset,
    config: Option<&Bound<'_, PyDict>>,
) -> PyResult<TrainResult> {
    let cfg: TrainRunConfig = from_py(py, config)?;
    let inner = py
        .detach(|| training::train(&backbone.inner, &dataset.inner.train, &cfg))
        .map_err(py_err)?;
    Ok(TrainResult { inner, config: cfg })
}

/// Run (or resume, when `path` holds a study) a hyperparameter study.
#[pyfunction]
#[pyo3(signature = (backbone, dataset, strategy, n_trials, base=None, sampler="tpe", seed=0, path=None))]
#[allow(clippy::too_many_arguments)]
fn sweep(
    py: Python<'_>,
    backbone: &Backbone,
    dataset: &Dataset,
    strategy: &str,
    n_trials: usize,
    base: Option<&Bound<'_, PyDict>>,
    sampler: &str,
    seed: u64,
    path: Option<PathBuf>,
) -> PyResult<Py<PyAny>> {
    let base: TrainRunConfig = from_py(py, base)?;
    let sampler: SamplerKind = serde_json::from_value(serde_json::Value::String(sampler.into()))
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let mut study = match &path {
        Some(p) if p.exists() => StudyState::load(p).map_err(py_err)?,
        _ => StudyState::new(kind(strategy)?, SearchSpace::for_backbone(&backbone.inner.config), sampler, seed)
            .map_err(py_err)?,
    };
    let mut obj = TrainingObjective {
        backbone: &backbone.inner,
        data: &dataset.inner,
        base,
    };
    run_study(&mut study, n_trials, &mut obj, path.as_deref()).map_err(py_err)?;
    to_py(py, &study.trials)
}

#[pyfunction]
fn dice_score(pred: Vec<Vec<u8>>, target: Vec<Vec<u8>>) -> PyResult<f64> {
    let mask = |rows: Vec<Vec<u8>>| {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        Mask::new(h, w, rows.concat())
    };
    training::dice_score(&mask(pred).map_err(py_err)?, &mask(target).map_err(py_err)?).map_err(py_err)
}

/// Least-squares line through (x, y) points: (slope, intercept, r2).
#[pyfunction]
fn fit_line(points: Vec<(f64, f64)>) -> PyResult<(f64, f64, f64)> {
    let f = linear_fit(&points).map_err(py_err)?;
    Ok((f.slope, f.intercept, f.r2))
}

#[pymodule]
fn promptseg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FreezeViolation", m.py().get_type::<FreezeViolation>())?;
    m.add("PromptsegError", m.py().get_type::<PromptsegError>())?;
    m.add_class::<Backbone>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<TrainResult>()?;
    m.add_function(wrap_pyfunction!(strategies, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(dice_score, m)?)?;
    m.add_function(wrap_pyfunction!(fit_line, m)?)?;
    Ok(())
}
