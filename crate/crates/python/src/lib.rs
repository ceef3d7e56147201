//! Python bindings: the online model, checkpoints, datasets, metrics and
//! evaluation. Vectors cross the boundary as lists of floats.

use flowr_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint as CoreCheckpoint};
use flowr_core::config::ExperimentConfig;
use flowr_core::crp::{predictive_class_probs, ClassCounts, CrpParams};
use flowr_core::data::{generate_synthetic_world, read_dataset, write_dataset, EmbeddingDataset, Sample};
use flowr_core::encoder::Encoder;
use flowr_core::error::FlowrError;
use flowr_core::experiment::{evaluate as core_evaluate, EvalConfig, Method};
use flowr_core::gaussian::{NoiseModel, SharedPrior};
use flowr_core::gradcheck::{verification_suite, GradCheckOptions};
use flowr_core::meta::{EpisodeConfig, Setting};
use flowr_core::metrics;
use flowr_core::model::{fine_tune_output_layer, ModelState, PredictionRecord};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(
    flowr,
    FlowrException,
    PyException,
    "Raised for any flowr-core failure; the message starts with the error kind."
);

fn py_err(e: FlowrError) -> PyErr {
    FlowrException::new_err(format!("{}: {e}", e.kind()))
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for flowr_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn to_samples(features: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<Vec<Sample>> {
    if features.len() != labels.len() {
        return Err(py_err(FlowrError::DimensionMismatch {
            expected: features.len(),
            actual: labels.len(),
        }));
    }
    Ok(labels
        .into_iter()
        .zip(features)
        .map(|(y, x)| Sample::new(y, x))
        .collect())
}

fn to_dataset(features: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<EmbeddingDataset> {
    let dim = features.first().map_or(0, Vec::len);
    EmbeddingDataset::new(dim, to_samples(features, labels)?).py()
}

fn split_dataset(ds: &EmbeddingDataset) -> (Vec<Vec<f64>>, Vec<usize>) {
    ds.samples().iter().map(|s| (s.features.clone(), s.label)).unzip()
}

/// Output of `Model.predict`. The last entry of `probs` is the novel slot.
#[pyclass(frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
pub struct Prediction {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
    /// 1-based argmax over all slots; `n_at_prediction + 1` means novel.
    predicted: usize,
    known_argmax: Option<usize>,
    novelty_score: f64,
    n_at_prediction: usize,
    true_label: Option<usize>,
}

impl From<PredictionRecord> for Prediction {
    fn from(r: PredictionRecord) -> Self {
        Self {
            probs: r.probs,
            log_probs: r.log_probs,
            predicted: r.predicted,
            known_argmax: r.known_argmax,
            novelty_score: r.novelty_score,
            n_at_prediction: r.n_at_prediction,
            true_label: r.true_label,
        }
    }
}

#[pymethods]
impl Prediction {
    fn __repr__(&self) -> String {
        format!(
            "Prediction(predicted={}, novelty_score={:.6}, n_at_prediction={})",
            self.predicted, self.novelty_score, self.n_at_prediction
        )
    }
}

/// Online open-world recognizer: per-class conjugate Gaussian posteriors
/// under a CRP class prior.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
pub struct Model {
    inner: ModelState,
}

#[pymethods]
impl Model {
    /// An empty model on raw features (identity encoder).
    #[new]
    #[pyo3(signature = (dim, prior_variance=1.0, prior_mean=None, a=0.5, b=1.0, noise_variance=0.5, empty_class_mass=0.0))]
    fn new(
        dim: usize,
        prior_variance: f64,
        prior_mean: Option<Vec<f64>>,
        a: f64,
        b: f64,
        noise_variance: f64,
        empty_class_mass: f64,
    ) -> PyResult<Self> {
        let prior = SharedPrior::from_moments(prior_mean.unwrap_or_else(|| vec![0.0; dim]), prior_variance).py()?;
        let crp = CrpParams::with_b(a, b).py()?.with_empty_class_mass(empty_class_mass);
        let inner = ModelState::empty(
            Encoder::identity(dim),
            prior,
            crp,
            NoiseModel::new(noise_variance).py()?,
        )
        .py()?;
        Ok(Self { inner })
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// CRP counts per class.
    #[getter]
    fn counts(&self) -> Vec<u64> {
        self.inner.counts.as_slice().to_vec()
    }

    /// Posterior mean and variance of class `label` (1-based).
    fn class_posterior(&self, label: usize) -> PyResult<(Vec<f64>, f64)> {
        let s = self.inner.class_stats.get(label.wrapping_sub(1)).ok_or_else(|| {
            py_err(FlowrError::UnknownClass {
                label,
                n_classes: self.inner.n_classes(),
            })
        })?;
        let g = s.to_moment();
        Ok((g.mean, g.variance))
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<Prediction> {
        Ok(self.inner.predict(&x).py()?.into())
    }

    /// Reveal the label of `x`; `n_classes + 1` instantiates a new class.
    fn update(&mut self, x: Vec<f64>, y: usize) -> PyResult<()> {
        self.inner.update(&x, y).py()
    }

    /// Predict then update on every query in order (labels use the
    /// `n_classes + 1` convention for first sightings).
    fn run_episode(&mut self, features: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<Vec<Prediction>> {
        let queries = to_samples(features, labels)?;
        Ok(self
            .inner
            .run_episode(&queries)
            .py()?
            .into_iter()
            .map(Prediction::from)
            .collect())
    }

    /// Fine-tune the affine output layer on a support set; returns the tuned
    /// model (rebuilt from the support set) and the loss trace.
    #[pyo3(signature = (features, labels, steps, step_size=1e-3))]
    fn fine_tune(
        &self,
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        steps: usize,
        step_size: f64,
    ) -> PyResult<(Model, Vec<f64>)> {
        let support = to_samples(features, labels)?;
        let out = fine_tune_output_layer(&self.inner, &support, steps, step_size, true).py()?;
        Ok((Model { inner: out.state }, out.loss_trace))
    }

    fn copy(&self) -> Self {
        self.clone()
    }

    fn __repr__(&self) -> String {
        format!("Model(dim={}, n_classes={})", self.inner.dim(), self.inner.n_classes())
    }
}

/// Trained parameters with optional embeddings and experiment config.
#[pyclass(skip_from_py_object)]
pub struct Checkpoint {
    inner: CoreCheckpoint,
    warnings: Vec<String>,
}

#[pymethods]
impl Checkpoint {
    /// Load from disk. With `expected_config` (JSON), a hash mismatch is
    /// reported through `warnings`.
    #[staticmethod]
    #[pyo3(signature = (path, expected_config=None))]
    fn load(path: &str, expected_config: Option<&str>) -> PyResult<Self> {
        let expected = expected_config.map(ExperimentConfig::from_json).transpose().py()?;
        let (inner, warnings) = load_checkpoint(path, expected.as_ref()).py()?;
        Ok(Self { inner, warnings })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(path, &self.inner).py()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.warnings.clone()
    }

    /// Number of known-known classes (0 for a small-context checkpoint).
    #[getter]
    fn n_known(&self) -> usize {
        self.inner.params.n_known()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.params.encoder.d_in()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.params.dim()
    }

    #[getter]
    fn b(&self) -> f64 {
        self.inner.params.crp.b()
    }

    #[getter]
    fn a(&self) -> f64 {
        self.inner.params.crp.a
    }

    /// Prior mean and variance of a new class.
    #[getter]
    fn prior(&self) -> (Vec<f64>, f64) {
        let g = self.inner.params.prior().stats.to_moment();
        (g.mean, g.variance)
    }

    #[getter]
    fn config_json(&self) -> Option<String> {
        self.inner.config.as_ref().map(ExperimentConfig::to_json)
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.config_hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Small-context model initialized from a labelled support set.
    fn small_context_model(&self, features: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<Model> {
        let support = to_samples(features, labels)?;
        Ok(Model {
            inner: self.inner.params.small_context_state(&support).py()?,
        })
    }

    /// Large-context model with the known-known classes at zero counts.
    fn large_context_model(&self) -> PyResult<Model> {
        Ok(Model {
            inner: self.inner.params.large_context_state().py()?,
        })
    }
}

/// Sample a dataset from the Gaussian generative model; returns
/// `(features, labels, class_means)`.
#[pyfunction]
#[pyo3(signature = (n_classes, dim, prior_variance=25.0, noise_variance=0.5, points_per_class=30, seed=0))]
#[allow(clippy::type_complexity)]
fn generate_synthetic(
    n_classes: usize,
    dim: usize,
    prior_variance: f64,
    noise_variance: f64,
    points_per_class: usize,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<usize>, Vec<Vec<f64>>)> {
    let w = generate_synthetic_world(n_classes, dim, prior_variance, noise_variance, points_per_class, seed).py()?;
    let (x, y) = split_dataset(&w.dataset);
    Ok((x, y, w.means))
}

/// Read an FSE1 dataset; returns `(features, labels)`.
#[pyfunction]
fn load_dataset(path: &str) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    Ok(split_dataset(&read_dataset(path).py()?))
}

/// Write an FSE1 dataset (features are stored as float32).
#[pyfunction]
fn save_dataset(path: &str, features: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<()> {
    write_dataset(path, &to_dataset(features, labels)?).py()
}

fn scores(positives: Vec<f64>, negatives: Vec<f64>) -> PyResult<metrics::ScoreSet> {
    metrics::ScoreSet::new(positives, negatives).py()
}

/// Area under the ROC curve; positives are the true-novel scores.
#[pyfunction]
fn auroc(positives: Vec<f64>, negatives: Vec<f64>) -> PyResult<f64> {
    Ok(metrics::auroc(&scores(positives, negatives)?))
}

#[pyfunction]
#[pyo3(signature = (positives, negatives, alpha=2.0, beta=2.0))]
fn h_measure(positives: Vec<f64>, negatives: Vec<f64>, alpha: f64, beta: f64) -> PyResult<f64> {
    metrics::h_measure(&scores(positives, negatives)?, alpha, beta).py()
}

/// ROC points as `(fpr, tpr, threshold)` tuples.
#[pyfunction]
fn roc_curve(positives: Vec<f64>, negatives: Vec<f64>) -> PyResult<Vec<(f64, f64, f64)>> {
    Ok(metrics::roc_curve(&scores(positives, negatives)?)
        .into_iter()
        .map(|p| (p.fpr, p.tpr, p.threshold))
        .collect())
}

/// Largest threshold reaching `target_tpr`; returns `(threshold, achieved_tpr)`.
#[pyfunction]
fn threshold_at_tpr(positives: Vec<f64>, target_tpr: f64) -> PyResult<(f64, f64)> {
    let op = metrics::threshold_at_tpr(&positives, target_tpr).py()?;
    Ok((op.threshold, op.achieved_tpr))
}

/// CRP predictive probabilities over the existing classes and a new one.
#[pyfunction]
#[pyo3(signature = (counts, a=0.5, b=1.0, empty_class_mass=0.0))]
fn crp_probs(counts: Vec<u64>, a: f64, b: f64, empty_class_mass: f64) -> PyResult<Vec<f64>> {
    let p = CrpParams::with_b(a, b).py()?.with_empty_class_mass(empty_class_mass);
    predictive_class_probs(&ClassCounts::from_counts(counts), &p).py()
}

/// Run the finite-difference gradient suite; one dict per checked loss.
#[pyfunction]
#[pyo3(signature = (seed=0, configs=10))]
fn grad_check<'py>(py: Python<'py>, seed: u64, configs: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let entries = py
        .detach(|| verification_suite(seed, configs, &GradCheckOptions::default()))
        .py()?;
    entries
        .into_iter()
        .map(|e| {
            let d = PyDict::new(py);
            d.set_item("loss", e.loss.name())?;
            d.set_item("config", e.config)?;
            d.set_item("max_rel_error", e.report.max_rel_error)?;
            d.set_item("n_checked", e.report.n_checked)?;
            Ok(d)
        })
        .collect()
}

/// Evaluate a checkpoint on episodes sampled from `(features, labels)` and
/// return the metric table as a dict (absent metrics are `None`).
#[pyfunction]
#[pyo3(signature = (
    checkpoint, features, labels, setting="sc", tpr=None, episodes=100, seed=0, method="flowr",
    support_classes=10, novel_classes=5, queries=10, shots_min=1, shots_max=10, workers=0,
    reference_features=None, reference_labels=None
))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: &Checkpoint,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    setting: &str,
    tpr: Option<f64>,
    episodes: usize,
    seed: u64,
    method: &str,
    support_classes: usize,
    novel_classes: usize,
    queries: usize,
    shots_min: usize,
    shots_max: usize,
    workers: usize,
    reference_features: Option<Vec<Vec<f64>>>,
    reference_labels: Option<Vec<usize>>,
) -> PyResult<Bound<'py, PyDict>> {
    let setting: Setting = setting.parse().py()?;
    let method: Method = method.parse().py()?;
    let data = to_dataset(features, labels)?;
    let reference = match (reference_features, reference_labels) {
        (Some(x), Some(y)) => Some(to_dataset(x, y)?),
        _ => None,
    };
    let large = setting == Setting::LargeContext;
    let n_known = if large {
        match (method, &checkpoint.inner.config) {
            (Method::Flowr, _) => checkpoint.inner.params.n_known(),
            (_, Some(cfg)) => cfg.n_known_classes,
            (_, None) => checkpoint.inner.params.n_known(),
        }
    } else {
        0
    };
    let cfg = EvalConfig {
        setting,
        method,
        episode: EpisodeConfig {
            n_support_classes: if large { 0 } else { support_classes },
            shots_min,
            shots_max: if large { shots_min } else { shots_max },
            n_novel_classes: novel_classes,
            queries_per_class: queries,
        },
        episodes,
        seed,
        tpr: tpr.unwrap_or(if large { 0.6 } else { 0.15 }),
        workers,
        fine_tune_steps: 0,
        fine_tune_step_size: 1e-3,
        known_classes: (1..=n_known).collect(),
    };
    let params = &checkpoint.inner.params;
    let out = py
        .detach(|| core_evaluate(params, &data, reference.as_ref(), &cfg))
        .py()?;
    let d = PyDict::new(py);
    let s = &out.suite;
    d.set_item("method", method.name())?;
    d.set_item("accuracy", s.accuracy)?;
    d.set_item("support_accuracy", s.support_accuracy)?;
    d.set_item("incremental_accuracy", s.incremental_accuracy)?;
    d.set_item("incremental_accuracy_with_first", s.incremental_accuracy_with_first)?;
    d.set_item("novel_detection_accuracy", s.novel_detection_accuracy)?;
    d.set_item("h_measure", s.h_measure)?;
    d.set_item("auroc", s.auroc)?;
    d.set_item("target_tpr", out.operating_point.target_tpr)?;
    d.set_item("achieved_tpr", out.operating_point.achieved_tpr)?;
    d.set_item("threshold", out.operating_point.threshold)?;
    d.set_item("n_queries", s.n_queries)?;
    d.set_item("table", out.metric_table())?;
    Ok(d)
}

#[pymodule]
fn flowr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FlowrError", m.py().get_type::<FlowrException>())?;
    m.add_class::<Model>()?;
    m.add_class::<Prediction>()?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(save_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(h_measure, m)?)?;
    m.add_function(wrap_pyfunction!(roc_curve, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_at_tpr, m)?)?;
    m.add_function(wrap_pyfunction!(crp_probs, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
