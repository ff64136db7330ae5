//! Python bindings. Structured results cross the boundary as JSON and come
//! out as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use hiersgg::assembly::BoundingBox;
use hiersgg::data::{self, Dataset, SyntheticSpec};
use hiersgg::eval::TripletSet;
use hiersgg::head::HeadMode;
use hiersgg::model::{HeadKind, Prediction};
use hiersgg::pipeline::{self, EvalOptions};
use hiersgg::train::TrainConfig;
use hiersgg::{Error, PredicateId, SuperCategoryId};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::NonFinite(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn from_json<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

fn to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Object and predicate vocabularies with the predicate partition.
#[pyclass(name = "LabelSpace", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyLabelSpace(hiersgg::LabelSpace);

#[pymethods]
impl PyLabelSpace {
    /// Parses a hierarchy JSON document.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        hiersgg::LabelSpace::from_json_str(text).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        hiersgg::LabelSpace::load(path).map(Self).map_err(err)
    }

    /// The built-in 150-object, 50-predicate space.
    #[staticmethod]
    fn vg150() -> Self {
        Self(hiersgg::LabelSpace::vg150())
    }

    #[getter]
    fn objects(&self) -> Vec<String> {
        self.0.objects().to_vec()
    }

    #[getter]
    fn predicates(&self) -> Vec<String> {
        self.0.predicates().to_vec()
    }

    #[getter]
    fn supers(&self) -> Vec<String> {
        self.0.supers().to_vec()
    }

    fn super_of(&self, predicate: &str) -> PyResult<String> {
        let p = self
            .0
            .predicate_id(predicate)
            .ok_or_else(|| PyValueError::new_err(format!("unknown predicate {predicate:?}")))?;
        Ok(self.0.super_name(self.0.super_of(p).map_err(err)?).to_string())
    }

    fn members(&self, sup: &str) -> PyResult<Vec<String>> {
        let s = self
            .0
            .super_id(sup)
            .ok_or_else(|| PyValueError::new_err(format!("unknown super-category {sup:?}")))?;
        Ok(self.0.predicates_in(s).map_err(err)?.iter().map(|&p| self.0.predicate_name(p).to_string()).collect())
    }

    fn digest(&self) -> String {
        self.0.digest()
    }

    fn to_json(&self) -> String {
        self.0.to_json_pretty()
    }

    fn __len__(&self) -> usize {
        self.0.num_predicates()
    }

    fn __repr__(&self) -> String {
        format!(
            "LabelSpace(objects={}, predicates={}, supers={})",
            self.0.num_objects(),
            self.0.num_predicates(),
            self.0.num_supers()
        )
    }
}

/// Projection plus relationship head.
#[pyclass(name = "Model", frozen)]
struct PyModel(hiersgg::model::Model);

fn parse_kind(kind: &str) -> PyResult<HeadKind> {
    from_json(&format!("{kind:?}"), "head kind")
}

fn parse_mode(mode: &str) -> PyResult<HeadMode> {
    from_json(&format!("{mode:?}"), "head mode")
}

#[pymethods]
impl PyModel {
    /// Seeded random init. `kind` is "hierarchical" or "flat"; `mode` is
    /// "bayes_consistent" or "scaled_logits".
    #[new]
    #[pyo3(signature = (space, input_dim, hidden_dim=32, kind="hierarchical", mode="bayes_consistent", seed=0))]
    fn new(space: &PyLabelSpace, input_dim: usize, hidden_dim: usize, kind: &str, mode: &str, seed: u64) -> PyResult<Self> {
        if input_dim == 0 || hidden_dim == 0 {
            return Err(PyValueError::new_err("dimensions must be positive"));
        }
        let (kind, mode) = (parse_kind(kind)?, parse_mode(mode)?);
        Ok(Self(hiersgg::model::Model::init(kind, input_dim, hidden_dim, &space.0, mode, seed)))
    }

    #[staticmethod]
    fn load(path: PathBuf, space: &PyLabelSpace) -> PyResult<Self> {
        data::load_params(&path, &space.0).map(|(m, _)| Self(m)).map_err(err)
    }

    fn save(&self, path: PathBuf, space: &PyLabelSpace) -> PyResult<()> {
        data::save_params(&self.0, &space.0, &path, serde_json::Value::Null).map_err(err)
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    #[getter]
    fn hidden_dim(&self) -> usize {
        self.0.hidden_dim()
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.0.kind() {
            HeadKind::Hierarchical => "hierarchical",
            HeadKind::Flat => "flat",
        }
    }

    /// Distributions for one edge input, keyed by label name.
    fn predict<'py>(&self, py: Python<'py>, input: Vec<f64>, space: &PyLabelSpace) -> PyResult<Bound<'py, PyDict>> {
        let s = &space.0;
        let out = PyDict::new(py);
        match self.0.predict(&input, s).map_err(err)? {
            Prediction::Hierarchical(p) => {
                out.set_item("connectivity", p.connectivity)?;
                let sup = PyDict::new(py);
                for (i, v) in p.super_probs.iter().enumerate() {
                    sup.set_item(s.super_name(SuperCategoryId(i)), v)?;
                }
                let cond = PyDict::new(py);
                let joint = PyDict::new(py);
                for q in 0..s.num_predicates() {
                    let name = s.predicate_name(PredicateId(q));
                    cond.set_item(name, p.conditional_of(PredicateId(q), s).map_err(err)?)?;
                    joint.set_item(name, p.joint_probs[q])?;
                }
                out.set_item("super_probs", sup)?;
                out.set_item("conditional_probs", cond)?;
                out.set_item("joint_probs", joint)?;
            }
            Prediction::Flat(p) => {
                out.set_item("connectivity", p.connectivity)?;
                let probs = PyDict::new(py);
                for (q, v) in p.probs.iter().enumerate() {
                    probs.set_item(s.predicate_name(PredicateId(q)), v)?;
                }
                out.set_item("probs", probs)?;
            }
        }
        Ok(out)
    }
}

/// Intersection over union of two `[x_min, y_min, x_max, y_max]` boxes.
#[pyfunction]
fn iou(a: [f64; 4], b: [f64; 4]) -> PyResult<f64> {
    let bx = |v: [f64; 4]| BoundingBox::new(v[0], v[1], v[2], v[3]).map_err(err);
    Ok(hiersgg::eval::iou(&bx(a)?, &bx(b)?))
}

/// Finite-difference check of the training loss for each seed and head variant.
#[pyfunction]
#[pyo3(signature = (seeds=vec![0]))]
fn gradcheck(py: Python<'_>, seeds: Vec<u64>) -> PyResult<Bound<'_, PyAny>> {
    let cases = py.detach(|| hiersgg::gradcheck::run_suite(seeds)).map_err(err)?;
    to_py(py, &cases)
}

/// Writes a synthetic dataset directory. `spec` is a JSON object of overrides.
#[pyfunction]
#[pyo3(signature = (out_dir, spec="{}"))]
fn synth(py: Python<'_>, out_dir: PathBuf, spec: &str) -> PyResult<()> {
    let spec: SyntheticSpec = from_json(spec, "synthetic spec")?;
    py.detach(|| generate_and_write(&spec, &out_dir)).map_err(err)
}

fn generate_and_write(spec: &SyntheticSpec, dir: &std::path::Path) -> hiersgg::Result<()> {
    data::generate_synthetic(spec)?.dataset.write_dir(dir)
}

/// Trains on a dataset directory and writes a checkpoint. Returns the
/// per-epoch mean losses.
#[pyfunction]
#[pyo3(signature = (data_dir, out, config="{}"))]
fn train(py: Python<'_>, data_dir: PathBuf, out: PathBuf, config: &str) -> PyResult<Vec<f64>> {
    let config: TrainConfig = from_json(config, "train config")?;
    py.detach(|| {
        let ds = Dataset::load_dir(&data_dir, None)?;
        let outcome = hiersgg::train::train(&ds, &config)?;
        let meta = serde_json::json!({ "train_config": config });
        data::save_params(&outcome.model, &ds.space, &out, meta)?;
        Ok(outcome.epoch_means())
    })
    .map_err(err)
}

fn triplets(path: Option<PathBuf>, space: &hiersgg::LabelSpace) -> hiersgg::Result<Option<TripletSet>> {
    path.map(|p| data::manifest::load_triplets(&p, space)).transpose()
}

/// Evaluates a checkpoint on the test split. `options` is a JSON object of
/// overrides (tasks, ks, score_mode, regime, workers).
#[pyfunction]
#[pyo3(signature = (data_dir, ckpt, options="{}", zero_shot=None))]
fn evaluate<'py>(
    py: Python<'py>,
    data_dir: PathBuf,
    ckpt: PathBuf,
    options: &str,
    zero_shot: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let opts: EvalOptions = from_json(options, "eval options")?;
    let reports = py
        .detach(|| {
            let ds = Dataset::load_dir(&data_dir, None)?;
            let (model, _) = data::load_params(&ckpt, &ds.space)?;
            let zs = triplets(zero_shot, &ds.space)?;
            pipeline::evaluate_checkpoint(&model, &ds, &opts, zs.as_ref())
        })
        .map_err(err)?;
    to_py(py, &reports)
}

/// Evaluates external per-edge predictions (JSON lines) against a test manifest.
#[pyfunction]
#[pyo3(signature = (hierarchy, manifest, logits, options="{}", zero_shot=None))]
fn evaluate_logits<'py>(
    py: Python<'py>,
    hierarchy: PathBuf,
    manifest: PathBuf,
    logits: PathBuf,
    options: &str,
    zero_shot: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let opts: EvalOptions = from_json(options, "eval options")?;
    let reports = py
        .detach(|| {
            let space = hiersgg::LabelSpace::load(&hierarchy)?;
            let m = data::DatasetManifest::load(&manifest)?;
            let edges = data::load_external_logits(&logits, &space)?;
            let zs = triplets(zero_shot, &space)?;
            pipeline::evaluate_external(&edges, &m, &space, &opts, zs.as_ref())
        })
        .map_err(err)?;
    to_py(py, &reports)
}

#[pymodule]
fn pyhiersgg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLabelSpace>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_logits, m)?)?;
    m.add("GRADCHECK_TOLERANCE", hiersgg::gradcheck::GRADCHECK_TOLERANCE)?;
    Ok(())
}
