//! Python bindings: datasets, synthesis, centroids, targets, weights,
//! training, evaluation and the curve primitives.

use std::path::PathBuf;

use cfair::centroids::{load_centroids, save_centroids, CentroidSet};
use cfair::cftrain::{full_loss, load_weight_table, save_weight_table, WeightTable};
use cfair::curves::{BiasReport, EvaluationCurves};
use cfair::fairmodule::{load_checkpoint, module_pseudo_score, save_checkpoint, ModuleParams};
use cfair::synth::{parse_groups, SynthConfig};
use cfair::transform::{alignment_report, load_target_table, resolve_reference, save_target_table, TargetTable};
use cfair::{EmbeddingDataset, Error, Orientation, PairKind, StepCurve};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Numerical(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn or_py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for cfair::Result<T> {
    fn or_py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

#[pyclass(name = "Dataset", frozen)]
pub struct PyDataset(EmbeddingDataset);

#[pymethods]
impl PyDataset {
    /// Flat row-major `embeddings` (n * d values), an identity index per
    /// image, an attribute index per identity, and the attribute names.
    #[new]
    fn new(
        d: usize,
        embeddings: Vec<f32>,
        identity_of: Vec<u32>,
        attribute_of_identity: Vec<u32>,
        attribute_names: Vec<String>,
    ) -> PyResult<Self> {
        EmbeddingDataset::new(d, embeddings, identity_of, attribute_of_identity, attribute_names)
            .map(Self)
            .or_py()
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        cfair::load_dataset(&path).map(Self).or_py()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        cfair::save_dataset(&self.0, &path).or_py()
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n()
    }

    #[getter]
    fn d(&self) -> usize {
        self.0.d()
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }

    #[getter]
    fn attribute_names(&self) -> Vec<String> {
        self.0.attribute_names().to_vec()
    }

    #[getter]
    fn identity_of(&self) -> Vec<u32> {
        self.0.identity_of().to_vec()
    }

    #[getter]
    fn attribute_of_identity(&self) -> Vec<u32> {
        self.0.attribute_of_identity().to_vec()
    }

    fn row(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.0.n() {
            return Err(PyValueError::new_err(format!("row {i} out of range")));
        }
        Ok(self.0.row_f64(i))
    }

    fn __len__(&self) -> usize {
        self.0.n()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, d={}, k={}, groups={:?})", self.0.n(), self.0.d(), self.0.k(), self.0.attribute_names())
    }
}

/// `groups` is `name:identities:images:sigma[,...]`.
#[pyfunction]
#[pyo3(signature = (dim, groups, seed = 0))]
fn synth(dim: usize, groups: &str, seed: u64) -> PyResult<PyDataset> {
    let cfg = SynthConfig {
        d: dim,
        groups: parse_groups(groups).or_py()?,
        seed,
    };
    cfair::generate(&cfg).map(PyDataset).or_py()
}

#[pyclass(name = "Centroids", frozen)]
pub struct PyCentroids(CentroidSet);

#[pymethods]
impl PyCentroids {
    #[staticmethod]
    fn estimate(ds: &PyDataset) -> PyResult<Self> {
        cfair::estimate_centroids(&ds.0).map(Self).or_py()
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_centroids(&path).map(Self).or_py()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_centroids(&self.0, &path).or_py()
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }

    #[getter]
    fn d(&self) -> usize {
        self.0.d()
    }

    fn centroid(&self, k: usize) -> PyResult<Vec<f64>> {
        if k >= self.0.k() {
            return Err(PyValueError::new_err(format!("identity {k} out of range")));
        }
        Ok(self.0.centroid(k).to_vec())
    }

    fn pseudo_score(&self, ds: &PyDataset, i: usize, k: usize) -> PyResult<f64> {
        self.0.check_matches(&ds.0).or_py()?;
        if i >= ds.0.n() || k >= self.0.k() {
            return Err(PyValueError::new_err("image or identity out of range"));
        }
        Ok(cfair::pseudo_score(&ds.0, &self.0, i, k))
    }
}

fn kind_name(kind: PairKind) -> &'static str {
    match kind {
        PairKind::Genuine => "genuine",
        PairKind::Impostor => "impostor",
    }
}

#[pyclass(name = "Targets", frozen)]
pub struct PyTargets(TargetTable);

#[pymethods]
impl PyTargets {
    /// Regression targets mapping every group onto the `reference` group.
    #[staticmethod]
    fn build(ds: &PyDataset, centroids: &PyCentroids, reference: &str) -> PyResult<Self> {
        let r = resolve_reference(&ds.0, reference).or_py()?;
        cfair::build_target_table(&ds.0, &centroids.0, r).map(Self).or_py()
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_target_table(&path).map(Self).or_py()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_target_table(&self.0, &path).or_py()
    }

    #[getter]
    fn reference(&self) -> String {
        self.0.reference_name().to_string()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    /// `(image, identity, kind, source, target, level)` per pseudo-pair.
    fn entries(&self) -> Vec<(u32, u32, &'static str, f64, f64, f64)> {
        self.0
            .entries()
            .iter()
            .map(|e| (e.image, e.identity, kind_name(e.kind), e.source, e.target, e.level))
            .collect()
    }
}

#[pyclass(name = "Weights", frozen)]
pub struct PyWeights(WeightTable);

#[pymethods]
impl PyWeights {
    #[staticmethod]
    fn compute(ds: &PyDataset, centroids: &PyCentroids) -> PyResult<Self> {
        cfair::compute_weights(&ds.0, &centroids.0).map(Self).or_py()
    }

    #[staticmethod]
    fn load(path: PathBuf, targets: &PyTargets) -> PyResult<Self> {
        load_weight_table(&path, &targets.0).map(Self).or_py()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_weight_table(&self.0, &path).or_py()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.0.weights().to_vec()
    }

    #[getter]
    fn z_far(&self) -> f64 {
        self.0.z_far()
    }

    #[getter]
    fn z_frr(&self) -> f64 {
        self.0.z_frr()
    }
}

#[pyclass(name = "FairnessModule", frozen)]
pub struct PyFairnessModule(ModuleParams);

#[pymethods]
impl PyFairnessModule {
    /// Zero MLP with the pre-trained centroids: reproduces the input model.
    #[staticmethod]
    fn from_centroids(centroids: &PyCentroids) -> Self {
        Self(cfair::init_from_pretrained(&centroids.0))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_checkpoint(&path).map(|(p, _)| Self(p)).or_py()
    }

    #[pyo3(signature = (path, loss, epoch = 0))]
    fn save(&self, path: PathBuf, loss: f64, epoch: usize) -> PyResult<()> {
        save_checkpoint(&self.0, epoch, loss, &path).or_py()
    }

    #[getter]
    fn d(&self) -> usize {
        self.0.d()
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }

    #[getter]
    fn parameters(&self) -> Vec<f64> {
        self.0.values().to_vec()
    }

    fn forward(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        cfair::forward(&self.0, &x).or_py()
    }

    fn pseudo_score(&self, x: Vec<f64>, k: usize) -> PyResult<f64> {
        if k >= self.0.k() {
            return Err(PyValueError::new_err(format!("identity {k} out of range")));
        }
        module_pseudo_score(&self.0, &x, k).or_py()
    }

    fn loss(&self, ds: &PyDataset, targets: &PyTargets, weights: &PyWeights) -> PyResult<f64> {
        full_loss(&self.0, &targets.0, &weights.0, &ds.0).or_py()
    }
}

/// Trains the Fairness Module; returns it with the mean batch loss per epoch.
#[pyfunction]
#[pyo3(signature = (ds, centroids, targets, weights, batch_size = 4096, learning_rate = 1e-3, epochs = 20, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    ds: &PyDataset,
    centroids: &PyCentroids,
    targets: &PyTargets,
    weights: &PyWeights,
    batch_size: usize,
    learning_rate: f64,
    epochs: usize,
    seed: u64,
) -> PyResult<(PyFairnessModule, Vec<f64>)> {
    let cfg = cfair::TrainConfig {
        batch_size,
        learning_rate,
        epochs,
        reference: targets.0.reference(),
        seed,
    };
    let out = py
        .detach(|| cfair::train(&ds.0, &centroids.0, &targets.0, &weights.0, &cfg))
        .or_py()?;
    Ok((PyFairnessModule(out.params), out.log.iter().map(|e| e.mean_loss).collect()))
}

fn report_dict<'py>(py: Python<'py>, r: &BiasReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("alpha", r.alpha)?;
    d.set_item("threshold", r.threshold)?;
    d.set_item("roc", r.roc)?;
    d.set_item("bfar", r.bfar)?;
    d.set_item("bfrr", r.bfrr)?;
    let groups = PyDict::new(py);
    for (name, rates) in &r.per_group {
        let g = PyDict::new(py);
        g.set_item("far", rates.far)?;
        g.set_item("frr", rates.frr)?;
        groups.set_item(name, g)?;
    }
    d.set_item("per_group", groups)?;
    d.set_item("warnings", r.warnings.clone())?;
    Ok(d)
}

/// ROC, BFAR and BFRR on all image pairs, of the raw embeddings or of the
/// module's outputs when `module` is given.
#[pyfunction]
#[pyo3(signature = (ds, module = None, alphas = vec![1e-1, 1e-2, 1e-3]))]
fn evaluate<'py>(
    py: Python<'py>,
    ds: &PyDataset,
    module: Option<&PyFairnessModule>,
    alphas: Vec<f64>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let rows = match module {
        None => ds.0.rows_f64(),
        Some(m) => {
            let mut rows = Vec::with_capacity(ds.0.n() * ds.0.d());
            for i in 0..ds.0.n() {
                rows.extend(cfair::forward(&m.0, &ds.0.row_f64(i)).or_py()?);
            }
            rows
        }
    };
    let reports = py
        .detach(|| -> cfair::Result<Vec<BiasReport>> {
            let curves = EvaluationCurves::compute(&rows, ds.0.d(), &ds.0)?;
            alphas.iter().map(|&a| curves.report(&ds.0, a)).collect()
        })
        .or_py()?;
    reports.iter().map(|r| report_dict(py, r)).collect()
}

/// Per-group sup-gaps after mapping pseudo-scores onto `reference`.
#[pyfunction]
fn alignment<'py>(
    py: Python<'py>,
    ds: &PyDataset,
    centroids: &PyCentroids,
    reference: &str,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let r = resolve_reference(&ds.0, reference).or_py()?;
    let report = alignment_report(&ds.0, &centroids.0, r).or_py()?;
    report
        .iter()
        .map(|g| {
            let d = PyDict::new(py);
            d.set_item("attribute", &g.attribute)?;
            d.set_item("genuine_gap", g.genuine_gap)?;
            d.set_item("genuine_bound", g.genuine_bound)?;
            d.set_item("impostor_gap", g.impostor_gap)?;
            d.set_item("impostor_bound", g.impostor_bound)?;
            d.set_item("pass", g.pass)?;
            Ok(d)
        })
        .collect()
}

fn curve(scores: Vec<f64>, o: Orientation) -> PyResult<StepCurve> {
    StepCurve::from_scores(scores, o).or_py()
}

/// Share of genuine scores at or below `t`.
#[pyfunction]
fn frr(scores: Vec<f64>, t: f64) -> PyResult<f64> {
    Ok(curve(scores, Orientation::Frr)?.eval(t))
}

/// Share of impostor scores strictly above `t`.
#[pyfunction]
fn far(scores: Vec<f64>, t: f64) -> PyResult<f64> {
    Ok(curve(scores, Orientation::Far)?.eval(t))
}

#[pyfunction]
fn frr_inverse(scores: Vec<f64>, alpha: f64) -> PyResult<f64> {
    cfair::frr_inverse(&curve(scores, Orientation::Frr)?, alpha).or_py()
}

#[pyfunction]
fn far_inverse(scores: Vec<f64>, alpha: f64) -> PyResult<f64> {
    cfair::far_inverse(&curve(scores, Orientation::Far)?, alpha).or_py()
}

#[pyfunction]
fn roc(genuine: Vec<f64>, impostor: Vec<f64>, alpha: f64) -> PyResult<f64> {
    cfair::roc_point(&curve(genuine, Orientation::Frr)?, &curve(impostor, Orientation::Far)?, alpha).or_py()
}

#[pyfunction]
fn cosine(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    if u.len() != v.len() {
        return Err(PyValueError::new_err("vectors differ in length"));
    }
    cfair::cosine_score(&u, &v).or_py()
}

#[pymodule]
fn pycfair(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyCentroids>()?;
    m.add_class::<PyTargets>()?;
    m.add_class::<PyWeights>()?;
    m.add_class::<PyFairnessModule>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(alignment, m)?)?;
    m.add_function(wrap_pyfunction!(frr, m)?)?;
    m.add_function(wrap_pyfunction!(far, m)?)?;
    m.add_function(wrap_pyfunction!(frr_inverse, m)?)?;
    m.add_function(wrap_pyfunction!(far_inverse, m)?)?;
    m.add_function(wrap_pyfunction!(roc, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    Ok(())
}
