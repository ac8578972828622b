//! Python bindings for the adaptive-preference-optimization pipeline.
//!
//! Exposes the main types and operations in-process: datasets and the
//! synthetic shift generator, standardization, nearest-neighbor manifold
//! retrieval, the logit models, both training stages, the loss functions,
//! the detection metrics, and the config-driven end-to-end runner.
//!
//! Build with `cargo build -p eapo-py --release`; the resulting
//! `libeapo_py.so` imports as module `eapo_py` once named `eapo_py.so` on
//! the Python path (see `python/smoke_test.py`).

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use eapo_core::data as core_data;
use eapo_core::evaluation as core_eval;
use eapo_core::experiment as core_experiment;
use eapo_core::model as core_model;
use eapo_core::objectives as core_obj;
use eapo_core::retrieval as core_retrieval;
use eapo_core::training as core_training;
use eapo_core::EapoError;

fn to_py_err(err: EapoError) -> PyErr {
    match err {
        EapoError::Io { .. } => PyIOError::new_err(err.to_string()),
        _ => PyValueError::new_err(err.to_string()),
    }
}

fn parse_base_loss(loss: &str, gamma: f64, alpha: Option<f64>) -> PyResult<core_obj::BaseLoss> {
    match loss {
        "bce" => Ok(core_obj::BaseLoss::Bce),
        "focal" => Ok(core_obj::BaseLoss::Focal(
            core_obj::FocalParams::new(gamma, alpha).map_err(to_py_err)?,
        )),
        other => Err(PyValueError::new_err(format!(
            "loss must be 'bce' or 'focal', got '{other}'"
        ))),
    }
}

fn history_tuples(history: &core_training::TrainHistory) -> Vec<(usize, f64)> {
    history.epochs.iter().map(|e| (e.epoch, e.mean_loss)).collect()
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// A validated feature table with binary labels and optional event
/// intensities.
#[pyclass(name = "Dataset", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: core_data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Load a delimited table. Exactly one of `label_column` / `dm_column`
    /// selects the target role.
    #[staticmethod]
    #[pyo3(signature = (path, feature_columns, label_column=None, dm_column=None, delimiter=","))]
    fn load(
        path: PathBuf,
        feature_columns: Vec<String>,
        label_column: Option<String>,
        dm_column: Option<String>,
        delimiter: &str,
    ) -> PyResult<Self> {
        let target = match (label_column, dm_column) {
            (Some(l), None) => core_data::TargetColumn::Label(l),
            (None, Some(d)) => core_data::TargetColumn::DryMatter(d),
            _ => {
                return Err(PyValueError::new_err(
                    "specify exactly one of label_column / dm_column",
                ))
            }
        };
        let mut chars = delimiter.chars();
        let (Some(delim), None) = (chars.next(), chars.next()) else {
            return Err(PyValueError::new_err("delimiter must be one character"));
        };
        let schema = core_data::TableSchema {
            feature_columns,
            target,
            delimiter: delim,
        };
        Ok(Self {
            inner: core_data::load_table(Path::new(&path), &schema).map_err(to_py_err)?,
        })
    }

    fn export(&self, path: PathBuf) -> PyResult<()> {
        self.inner
            .export_table(Path::new(&path), ',')
            .map(drop)
            .map_err(to_py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn positive_count(&self) -> usize {
        self.inner.positive_count()
    }

    fn features(&self, i: usize) -> PyResult<Vec<f64>> {
        self.index_check(i)?;
        Ok(self.inner.records()[i].features.clone())
    }

    fn label(&self, i: usize) -> PyResult<u8> {
        self.index_check(i)?;
        Ok(self.inner.records()[i].label)
    }

    fn intensity(&self, i: usize) -> PyResult<Option<f64>> {
        self.index_check(i)?;
        Ok(self.inner.records()[i].intensity)
    }

    fn labels(&self) -> Vec<u8> {
        self.inner.records().iter().map(|r| r.label).collect()
    }

    fn intensities(&self) -> Vec<Option<f64>> {
        self.inner.records().iter().map(|r| r.intensity).collect()
    }

    fn feature_matrix(&self) -> Vec<Vec<f64>> {
        self.inner
            .records()
            .iter()
            .map(|r| r.features.clone())
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, dim={}, positives={})",
            self.inner.len(),
            self.inner.dim(),
            self.inner.positive_count()
        )
    }
}

impl PyDataset {
    fn index_check(&self, i: usize) -> PyResult<()> {
        if i < self.inner.len() {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!(
                "index {i} out of range for {} records",
                self.inner.len()
            )))
        }
    }
}

/// Seeded synthetic long-tail covariate-shift benchmark; returns
/// (train, test).
#[pyfunction]
#[pyo3(signature = (dim=12, n_train=20_000, n_test=5_000, positive_rate=0.05,
                    shift_magnitude=2.0, class_separation=3.0,
                    intensity_log_mean=18.420680743952367,
                    intensity_log_std=1.1512925464970227, seed=7))]
#[allow(clippy::too_many_arguments)]
fn generate_synthetic(
    dim: usize,
    n_train: usize,
    n_test: usize,
    positive_rate: f64,
    shift_magnitude: f64,
    class_separation: f64,
    intensity_log_mean: f64,
    intensity_log_std: f64,
    seed: u64,
) -> PyResult<(PyDataset, PyDataset)> {
    let cfg = core_data::SyntheticConfig {
        dim,
        n_train,
        n_test,
        positive_rate,
        shift_magnitude,
        class_separation,
        intensity_log_mean,
        intensity_log_std,
        seed,
    };
    let (train, test) = core_data::generate_synthetic(&cfg).map_err(to_py_err)?;
    Ok((PyDataset { inner: train }, PyDataset { inner: test }))
}

// ---------------------------------------------------------------------------
// Standardizer
// ---------------------------------------------------------------------------

/// Per-feature z-scoring fitted on a training set (population std; constant
/// features map to 0).
#[pyclass(name = "Standardizer", skip_from_py_object)]
#[derive(Clone)]
struct PyStandardizer {
    inner: core_data::Standardizer,
}

#[pymethods]
impl PyStandardizer {
    #[staticmethod]
    fn fit(train: &PyDataset) -> PyResult<Self> {
        Ok(Self {
            inner: core_data::Standardizer::fit(&train.inner).map_err(to_py_err)?,
        })
    }

    fn apply(&self, ds: &PyDataset) -> PyResult<PyDataset> {
        Ok(PyDataset {
            inner: self.inner.apply(&ds.inner).map_err(to_py_err)?,
        })
    }

    fn apply_features(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.apply_features(&x).map_err(to_py_err)
    }

    #[getter]
    fn means(&self) -> Vec<f64> {
        self.inner.means().to_vec()
    }

    #[getter]
    fn stds(&self) -> Vec<f64> {
        self.inner.stds().to_vec()
    }
}

// ---------------------------------------------------------------------------
// Retrieval
// ---------------------------------------------------------------------------

/// Deduplicated union of the k nearest training records of each query.
#[pyclass(name = "LocalManifold", skip_from_py_object)]
#[derive(Clone)]
struct PyLocalManifold {
    inner: core_retrieval::LocalManifold,
}

#[pymethods]
impl PyLocalManifold {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn source_indices(&self) -> Vec<usize> {
        self.inner.source_indices().to_vec()
    }

    #[getter]
    fn query_count(&self) -> usize {
        self.inner.query_count()
    }

    fn labels(&self) -> Vec<u8> {
        self.inner.records().iter().map(|r| r.label).collect()
    }

    fn export(&self, path: PathBuf) -> PyResult<()> {
        self.inner
            .export_table(Path::new(&path), ',')
            .map_err(to_py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "LocalManifold(n={}, queries={})",
            self.inner.len(),
            self.inner.query_count()
        )
    }
}

/// The label-1 subset of a manifold.
#[pyclass(name = "ExtremeSubset", skip_from_py_object)]
#[derive(Clone)]
struct PyExtremeSubset {
    inner: core_retrieval::ExtremeSubset,
}

#[pymethods]
impl PyExtremeSubset {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn export(&self, path: PathBuf) -> PyResult<()> {
        self.inner
            .export_table(Path::new(&path), ',')
            .map_err(to_py_err)
    }
}

/// Indices of the k training records nearest to `query` (Euclidean, ties to
/// the lower index).
#[pyfunction]
fn neighborhood(query: Vec<f64>, train: &PyDataset, k: usize) -> PyResult<Vec<usize>> {
    core_retrieval::neighborhood(&query, &train.inner, k).map_err(to_py_err)
}

#[pyfunction]
fn build_local_manifold(
    test_features: Vec<Vec<f64>>,
    train: &PyDataset,
    k: usize,
) -> PyResult<PyLocalManifold> {
    Ok(PyLocalManifold {
        inner: core_retrieval::build_local_manifold(&test_features, &train.inner, k)
            .map_err(to_py_err)?,
    })
}

#[pyfunction]
fn extract_extreme(manifold: &PyLocalManifold) -> PyExtremeSubset {
    PyExtremeSubset {
        inner: core_retrieval::extract_extreme(&manifold.inner),
    }
}

/// (features, y_plus, y_minus) triples for every manifold record.
#[pyfunction]
fn make_preference_pairs(manifold: &PyLocalManifold) -> Vec<(Vec<f64>, u8, u8)> {
    core_retrieval::make_preference_pairs(manifold.inner.records())
        .into_iter()
        .map(|p| (p.features, p.y_plus, p.y_minus))
        .collect()
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Scalar-logit classifier: `kind` is "logistic" or "mlp".
#[pyclass(name = "Classifier", skip_from_py_object)]
#[derive(Clone)]
struct PyClassifier {
    inner: core_model::Classifier,
}

#[pymethods]
impl PyClassifier {
    #[new]
    #[pyo3(signature = (kind, dim, hidden=None, seed=0))]
    fn new(kind: &str, dim: usize, hidden: Option<Vec<usize>>, seed: u64) -> PyResult<Self> {
        let (kind, hidden) = match kind {
            "logistic" => (core_model::ModelKind::Logistic, Vec::new()),
            "mlp" => (core_model::ModelKind::Mlp, hidden.unwrap_or_else(|| vec![64, 64])),
            other => {
                return Err(PyValueError::new_err(format!(
                    "kind must be 'logistic' or 'mlp', got '{other}'"
                )))
            }
        };
        Ok(Self {
            inner: core_model::Classifier::init(kind, dim, &hidden, seed).map_err(to_py_err)?,
        })
    }

    /// Raw logit for one input.
    fn forward(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.forward(&x).map_err(to_py_err)
    }

    /// Sigmoid of the logit.
    fn predict_proba(&self, x: Vec<f64>) -> PyResult<f64> {
        Ok(core_obj::sigmoid(self.inner.forward(&x).map_err(to_py_err)?))
    }

    /// Gradient of `upstream * logit(x)` over the flat parameter vector.
    fn backward(&self, x: Vec<f64>, upstream: f64) -> PyResult<Vec<f64>> {
        self.inner.backward(&x, upstream).map_err(to_py_err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn hidden(&self) -> Vec<usize> {
        self.inner.hidden().to_vec()
    }

    fn parameters(&self) -> Vec<f64> {
        self.inner.parameters().to_vec()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner
            .save_checkpoint(Path::new(&path))
            .map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: core_model::Classifier::load_checkpoint(Path::new(&path)).map_err(to_py_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Classifier(kind={:?}, dim={}, hidden={:?}, params={})",
            self.inner.kind(),
            self.inner.dim(),
            self.inner.hidden(),
            self.inner.parameters().len()
        )
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Binary cross-entropy of a logit: returns (value, dvalue_dlogit).
#[pyfunction]
fn bce(logit: f64, y: u8) -> PyResult<(f64, f64)> {
    let l = core_obj::bce(logit, y).map_err(to_py_err)?;
    Ok((l.value, l.dvalue_dlogit))
}

/// Focal loss; `alpha=None` disables alpha-weighting.
#[pyfunction]
#[pyo3(signature = (logit, y, gamma=2.0, alpha=0.25))]
fn focal(logit: f64, y: u8, gamma: f64, alpha: Option<f64>) -> PyResult<(f64, f64)> {
    let params = core_obj::FocalParams::new(gamma, alpha).map_err(to_py_err)?;
    let l = core_obj::focal(logit, y, &params).map_err(to_py_err)?;
    Ok((l.value, l.dvalue_dlogit))
}

/// Preference loss against a frozen reference logit; the gradient is with
/// respect to `logit_theta`.
#[pyfunction]
#[pyo3(signature = (logit_theta, logit_ref, y_plus, beta=0.1))]
fn dpo(logit_theta: f64, logit_ref: f64, y_plus: u8, beta: f64) -> PyResult<(f64, f64)> {
    let l = core_obj::dpo(logit_theta, logit_ref, y_plus, beta).map_err(to_py_err)?;
    Ok((l.value, l.dvalue_dlogit))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Stage 1: supervised pretraining. Returns (trained model, history) where
/// history is a list of (epoch, mean loss).
#[pyfunction]
#[pyo3(signature = (model, train, loss="focal", epochs=50, learning_rate=0.005,
                    batch_size=256, seed=0, gamma=2.0, alpha=0.25))]
#[allow(clippy::too_many_arguments)]
fn pretrain(
    model: &PyClassifier,
    train: &PyDataset,
    loss: &str,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
    gamma: f64,
    alpha: Option<f64>,
) -> PyResult<(PyClassifier, Vec<(usize, f64)>)> {
    let cfg = core_training::PretrainConfig {
        loss: parse_base_loss(loss, gamma, alpha)?,
        epochs,
        learning_rate,
        batch_size,
        checkpoint: None,
        seed,
    };
    let (trained, history) =
        core_training::pretrain(model.inner.clone(), &train.inner, &cfg).map_err(to_py_err)?;
    Ok((PyClassifier { inner: trained }, history_tuples(&history)))
}

/// Stage 2: fine-tune `model` on the retrieved manifold against the frozen
/// `reference` (usually the pretrained model). Returns
/// (adapted model, history, warnings).
#[pyfunction]
#[pyo3(signature = (model, reference, manifold, extreme, beta=0.1, lambda1=1.0,
                    lambda2=0.1, sft_loss="focal", epochs=100, learning_rate=1e-4,
                    batch_size=256, mode="eapo", seed=0, gamma=2.0, alpha=0.25, k=5))]
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn finetune(
    model: &PyClassifier,
    reference: &PyClassifier,
    manifold: &PyLocalManifold,
    extreme: &PyExtremeSubset,
    beta: f64,
    lambda1: f64,
    lambda2: f64,
    sft_loss: &str,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    mode: &str,
    seed: u64,
    gamma: f64,
    alpha: Option<f64>,
    k: usize,
) -> PyResult<(PyClassifier, Vec<(usize, f64)>, Vec<String>)> {
    let mode = match mode {
        "eapo" => core_training::FinetuneMode::Eapo,
        "sft_only" | "sft-only" => core_training::FinetuneMode::SftOnly,
        other => {
            return Err(PyValueError::new_err(format!(
                "mode must be 'eapo' or 'sft-only', got '{other}'"
            )))
        }
    };
    let cfg = core_training::FinetuneConfig {
        k,
        weights: core_obj::EapoWeights::new(beta, lambda1, lambda2).map_err(to_py_err)?,
        sft_loss: parse_base_loss(sft_loss, gamma, alpha)?,
        epochs,
        learning_rate,
        batch_size,
        mode,
        query_subsample: None,
        checkpoint: None,
        seed,
    };
    let frozen = reference.inner.freeze_reference();
    let (adapted, history) = core_training::finetune(
        model.inner.clone(),
        &frozen,
        &manifold.inner,
        &extreme.inner,
        &cfg,
    )
    .map_err(to_py_err)?;
    Ok((
        PyClassifier { inner: adapted },
        history_tuples(&history),
        history.warnings,
    ))
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Exact rank-based ROC-AUC (ties counted one half).
#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    core_eval::roc_auc(&scores, &labels).map_err(to_py_err)
}

/// F1-maximizing threshold over the precision-recall candidate set.
#[pyfunction]
fn select_threshold_pr(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    core_eval::select_threshold_pr(&scores, &labels).map_err(to_py_err)
}

/// Confusion metrics at a threshold, as a dict.
#[pyfunction]
fn metrics_at_threshold<'py>(
    py: Python<'py>,
    scores: Vec<f64>,
    labels: Vec<u8>,
    threshold: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let r = core_eval::metrics_at_threshold(&scores, &labels, threshold).map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("threshold", r.threshold)?;
    out.set_item("accuracy", r.accuracy)?;
    out.set_item("precision", r.precision)?;
    out.set_item("recall", r.recall)?;
    out.set_item("f1", r.f1)?;
    out.set_item("roc_auc", r.roc_auc)?;
    out.set_item("tp", r.counts.tp)?;
    out.set_item("fp", r.counts.fp)?;
    out.set_item("tn", r.counts.tn)?;
    out.set_item("fn", r.counts.fn_)?;
    Ok(out)
}

/// Per-bin detection rates over log10 intensity, as a list of dicts.
#[pyfunction]
#[pyo3(signature = (scores, labels, intensities, threshold, bin_width=0.5))]
#[allow(clippy::type_complexity)]
fn intensity_breakdown<'py>(
    py: Python<'py>,
    scores: Vec<f64>,
    labels: Vec<u8>,
    intensities: Vec<Option<f64>>,
    threshold: f64,
    bin_width: f64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let breakdown =
        core_eval::intensity_breakdown(&scores, &labels, &intensities, threshold, bin_width)
            .map_err(to_py_err)?;
    breakdown
        .bins
        .iter()
        .map(|b| {
            let d = PyDict::new(py);
            d.set_item("log10_lo", b.lo)?;
            d.set_item("log10_hi", b.hi)?;
            d.set_item("positive_count", b.positive_count)?;
            d.set_item("detected_count", b.detected_count)?;
            d.set_item("detection_rate", b.detection_rate)?;
            Ok(d)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// End-to-end runner
// ---------------------------------------------------------------------------

/// Run the full pipeline from a JSON config document (or a previous run's
/// manifest) into `out_dir`; returns the run manifest as JSON.
#[pyfunction]
fn run_experiment(config_json: &str, out_dir: PathBuf) -> PyResult<String> {
    let cfg = core_experiment::ExperimentConfig::from_json_str(config_json).map_err(to_py_err)?;
    let manifest = core_experiment::cmd_run_all(&cfg, Path::new(&out_dir)).map_err(to_py_err)?;
    manifest.to_json_pretty().map_err(to_py_err)
}

#[pymodule]
fn eapo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyStandardizer>()?;
    m.add_class::<PyLocalManifold>()?;
    m.add_class::<PyExtremeSubset>()?;
    m.add_class::<PyClassifier>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(neighborhood, m)?)?;
    m.add_function(wrap_pyfunction!(build_local_manifold, m)?)?;
    m.add_function(wrap_pyfunction!(extract_extreme, m)?)?;
    m.add_function(wrap_pyfunction!(make_preference_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(bce, m)?)?;
    m.add_function(wrap_pyfunction!(focal, m)?)?;
    m.add_function(wrap_pyfunction!(dpo, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(select_threshold_pr, m)?)?;
    m.add_function(wrap_pyfunction!(metrics_at_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(intensity_breakdown, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
