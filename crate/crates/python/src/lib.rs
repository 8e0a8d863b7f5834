//! Python bindings: configuration, synthetic data, the augmentation and loss
//! primitives, checkpoints and the experiment commands.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use vibefm::checkpoint::Checkpoint;
use vibefm::datamodel::{DomainTag, Segment, Signal};
use vibefm::experiment::{parse_domain, ExperimentConfig, Format};
use vibefm::pipeline::{self, FINETUNE_CHECKPOINT, PRETRAIN_CHECKPOINT};
use vibefm::{augment, evaluation, focal, preprocess, rng, synthgen, training, Error};

create_exception!(vibefm_py, VibefmError, PyException, "Raised for every library failure; the message starts with its code.");

fn err(e: Error) -> PyErr {
    VibefmError::new_err(format!("[{}] {e}", e.code()))
}

trait OrPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> OrPy<T> for vibefm::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(err)
    }
}

fn to_signal(rows: Vec<Vec<f32>>) -> PyResult<Signal> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(err(Error::ShapeMismatch("signal rows differ in length".into())));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.concat()).map_err(|e| err(Error::ShapeMismatch(e.to_string())))
}

fn from_signal(x: &Signal) -> Vec<Vec<f32>> {
    x.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn paths(files: Vec<PathBuf>) -> Vec<String> {
    files.into_iter().map(|p| p.to_string_lossy().into_owned()).collect()
}

/// Experiment configuration with defaults for every omitted key.
#[pyclass(name = "Config", frozen, skip_from_py_object, module = "vibefm_py")]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (overrides=None))]
    fn new(overrides: Option<Vec<String>>) -> PyResult<Self> {
        Self::parse("", "toml", overrides)
    }

    /// Reads a TOML file, or JSON when the path ends in `.json`.
    #[staticmethod]
    #[pyo3(signature = (path, overrides=None))]
    fn load(path: PathBuf, overrides: Option<Vec<String>>) -> PyResult<Self> {
        let inner = ExperimentConfig::load(&path, &overrides.unwrap_or_default()).py_err()?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (text, format="toml", overrides=None))]
    fn parse(text: &str, format: &str, overrides: Option<Vec<String>>) -> PyResult<Self> {
        let format = match format {
            "toml" => Format::Toml,
            "json" => Format::Json,
            other => return Err(err(Error::InvalidArgument(format!("unknown format `{other}`")))),
        };
        let inner = ExperimentConfig::parse(text, format, &overrides.unwrap_or_default()).py_err()?;
        Ok(Self { inner })
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.inner.output_dir()
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().py_err()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| err(e.into()))
    }

    /// Hash of the full configuration, as recorded in `manifest.json`.
    fn hash(&self) -> PyResult<String> {
        self.inner.hash().py_err()
    }

    fn __repr__(&self) -> String {
        format!("Config(name={:?}, seed={})", self.inner.name, self.inner.seed)
    }
}

#[pyclass(name = "Segment", frozen, skip_from_py_object, module = "vibefm_py")]
#[derive(Clone)]
struct PySegment {
    inner: Segment,
}

#[pymethods]
impl PySegment {
    #[getter]
    fn label(&self) -> Option<usize> {
        self.inner.label
    }

    #[getter]
    fn domain(&self) -> &'static str {
        self.inner.domain.as_str()
    }

    #[getter]
    fn run_id(&self) -> &str {
        &self.inner.run_id
    }

    #[getter]
    fn start_time_s(&self) -> f64 {
        self.inner.start_time_s
    }

    #[getter]
    fn modalities(&self) -> Vec<String> {
        self.inner.signals.keys().cloned().collect()
    }

    /// `[channels][samples]` of one modality.
    fn signal(&self, modality: &str) -> PyResult<Vec<Vec<f32>>> {
        Ok(from_signal(self.inner.signal(modality).py_err()?))
    }

    fn __repr__(&self) -> String {
        format!(
            "Segment(run_id={:?}, label={:?}, domain={}, start_time_s={})",
            self.inner.run_id,
            self.inner.label,
            self.inner.domain,
            self.inner.start_time_s
        )
    }
}

fn segments(items: &[PyRef<'_, PySegment>]) -> Vec<Segment> {
    items.iter().map(|s| s.inner.clone()).collect()
}

fn wrap(items: Vec<Segment>) -> Vec<PySegment> {
    items.into_iter().map(|inner| PySegment { inner }).collect()
}

#[pyclass(name = "Checkpoint", frozen, module = "vibefm_py")]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(&path).py_err()?,
        })
    }

    #[getter]
    fn stage(&self) -> String {
        self.inner.meta.stage.to_string()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.meta.seed
    }

    #[getter]
    fn num_classes(&self) -> Option<usize> {
        self.inner.meta.head.map(|h| h.num_classes)
    }

    fn tensor_names(&self) -> Vec<String> {
        self.inner.tensors.keys().cloned().collect()
    }

    /// Number of stored parameters whose name starts with `prefix`.
    #[pyo3(signature = (prefix=""))]
    fn num_parameters(&self, prefix: &str) -> usize {
        self.inner
            .tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.shape.iter().product::<usize>())
            .sum()
    }

    fn encoder_hash(&self) -> String {
        self.inner.encoder_hash()
    }

    fn sha256(&self) -> PyResult<String> {
        self.inner.sha256().py_err()
    }

    /// Predicted class of each segment.
    fn predict(&self, py: Python<'_>, segments: Vec<PyRef<'_, PySegment>>) -> PyResult<Vec<usize>> {
        let data = self::segments(&segments);
        let ckpt = &self.inner;
        py.detach(|| {
            let model = ckpt.to_model()?;
            training::predict_segments(&model, &data, &model.specs)
        })
        .py_err()
    }

    fn __repr__(&self) -> String {
        format!("Checkpoint(stage={}, seed={})", self.inner.meta.stage, self.inner.meta.seed)
    }
}

/// Generates the labeled synthetic dataset of `domain` ("SYNTH_A" or "SYNTH_B").
#[pyfunction]
#[pyo3(signature = (config, domain="SYNTH_A"))]
fn generate(py: Python<'_>, config: &PyConfig, domain: &str) -> PyResult<Vec<PySegment>> {
    let domain: DomainTag = parse_domain(domain).py_err()?;
    let spec = config.inner.synth_spec();
    Ok(wrap(py.detach(|| synthgen::generate_dataset(&spec, domain)).py_err()?))
}

/// Held-out accuracy of a nearest-centroid classifier on mean spectra.
#[pyfunction]
#[pyo3(signature = (segments, config=None))]
fn separability_probe(segments: Vec<PyRef<'_, PySegment>>, config: Option<&PyConfig>) -> PyResult<f64> {
    let specs = config.map_or_else(vibefm::datamodel::default_specs, |c| c.inner.data.synth.modalities.clone());
    synthgen::separability_probe(&self::segments(&segments), &specs).py_err()
}

/// Per-interval spectrum of a `[channels][samples]` signal, as `(re, im)`
/// nested lists of shape `[channels][intervals][bins]`.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn stft(signal: Vec<Vec<f32>>, num_intervals: usize) -> PyResult<(Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>)> {
    let x = to_signal(signal)?;
    let s = preprocess::signal_stft("signal", x.view(), num_intervals).py_err()?;
    let nest = |a: &ndarray::Array3<f64>| -> Vec<Vec<Vec<f64>>> {
        a.outer_iter()
            .map(|c| c.rows().into_iter().map(|r| r.to_vec()).collect())
            .collect()
    };
    Ok((nest(&s.re), nest(&s.im)))
}

#[pyfunction]
fn negate(signal: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
    Ok(from_signal(&augment::negate(&to_signal(signal)?)))
}

#[pyfunction]
fn horizontal_flip(signal: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
    Ok(from_signal(&augment::horizontal_flip(&to_signal(signal)?)))
}

/// Shuffles `k` equal chunks of the time axis with the given seed.
#[pyfunction]
#[pyo3(signature = (signal, k, seed=0))]
fn permutation(signal: Vec<Vec<f32>>, k: usize, seed: u64) -> PyResult<Vec<Vec<f32>>> {
    let mut r = rng::stream(seed, "python-permutation", &[]);
    Ok(from_signal(&augment::permutation(&to_signal(signal)?, k, &mut r).py_err()?))
}

#[pyfunction]
#[pyo3(signature = (anchors, positives, tau=0.07))]
fn info_nce(anchors: Vec<Vec<f64>>, positives: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    focal::info_nce(&anchors, &positives, tau).py_err()
}

/// Accuracy and macro-F1 as a dict.
#[pyfunction]
fn metrics<'py>(
    py: Python<'py>,
    predictions: Vec<usize>,
    truth: Vec<usize>,
    num_classes: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let m = evaluation::metrics(&predictions, &truth, num_classes).py_err()?;
    let d = PyDict::new(py);
    d.set_item("accuracy", m.accuracy)?;
    d.set_item("macro_f1", m.macro_f1)?;
    Ok(d)
}

/// Run-level stratified split into `(train, val, test)`.
#[pyfunction]
#[pyo3(signature = (segments, ratios=(8.0, 1.0, 1.0), seed=0))]
#[allow(clippy::type_complexity)]
fn split(
    segments: Vec<PyRef<'_, PySegment>>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> PyResult<(Vec<PySegment>, Vec<PySegment>, Vec<PySegment>)> {
    let spec = evaluation::SplitSpec {
        ratios: [ratios.0, ratios.1, ratios.2],
        seed,
        stratified: true,
    };
    let s = evaluation::split_dataset(&self::segments(&segments), &spec).py_err()?;
    Ok((wrap(s.train), wrap(s.val), wrap(s.test)))
}

/// Indices of the labeled subset kept at `ratio`; smaller ratios nest.
#[pyfunction]
#[pyo3(signature = (segments, ratio, seed=0))]
fn subsample(segments: Vec<PyRef<'_, PySegment>>, ratio: f64, seed: u64) -> PyResult<Vec<usize>> {
    evaluation::subsample_indices(&self::segments(&segments), ratio, seed).py_err()
}

fn recorded(config: &ExperimentConfig, command: &str, files: Vec<PathBuf>) -> PyResult<Vec<String>> {
    pipeline::record_manifest(&config.output_dir(), config, command, &files).py_err()?;
    Ok(paths(files))
}

/// Writes SYNTH_A, SYNTH_B and the pre-training corpus under the output
/// directory. Returns the written paths.
#[pyfunction]
fn synth(py: Python<'_>, config: &PyConfig) -> PyResult<Vec<String>> {
    let c = &config.inner;
    let files = py.detach(|| pipeline::synth(c, &c.output_dir())).py_err()?;
    recorded(c, "synth", files)
}

#[pyfunction]
fn pretrain(py: Python<'_>, config: &PyConfig) -> PyResult<Vec<String>> {
    let c = &config.inner;
    let files = py.detach(|| pipeline::pretrain(c, &c.output_dir())).py_err()?;
    recorded(c, "pretrain", files)
}

#[pyfunction]
#[pyo3(signature = (config, ratio=1.0))]
fn train(py: Python<'_>, config: &PyConfig, ratio: f64) -> PyResult<Vec<String>> {
    let c = &config.inner;
    let files = py.detach(|| pipeline::train(c, &c.output_dir(), ratio)).py_err()?;
    recorded(c, "train", files)
}

/// Linear probe on a pre-trained checkpoint or output-layer fine-tuning of a
/// supervised one. The checkpoint defaults to the experiment's pretrain.ckpt.
#[pyfunction]
#[pyo3(signature = (config, checkpoint=None, ratio=1.0))]
fn finetune(py: Python<'_>, config: &PyConfig, checkpoint: Option<PathBuf>, ratio: f64) -> PyResult<Vec<String>> {
    let c = &config.inner;
    let dir = c.output_dir();
    let ckpt = checkpoint.unwrap_or_else(|| dir.join(PRETRAIN_CHECKPOINT));
    let files = py.detach(|| pipeline::finetune(c, &dir, &ckpt, ratio)).py_err()?;
    recorded(c, "finetune", files)
}

/// Test-split scores per test domain, as a list of dicts.
#[pyfunction]
#[pyo3(signature = (config, checkpoint=None))]
fn evaluate<'py>(
    py: Python<'py>,
    config: &PyConfig,
    checkpoint: Option<PathBuf>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let c = &config.inner;
    let dir = c.output_dir();
    let ckpt = checkpoint.unwrap_or_else(|| dir.join(FINETUNE_CHECKPOINT));
    let (scores, files) = py.detach(|| pipeline::evaluate(c, &dir, &ckpt)).py_err()?;
    recorded(c, "evaluate", files)?;
    scores
        .into_iter()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("domain", s.domain.as_str())?;
            d.set_item("samples", s.samples)?;
            d.set_item("accuracy", s.accuracy)?;
            d.set_item("macro_f1", s.macro_f1)?;
            Ok(d)
        })
        .collect()
}

/// Runs the evaluation grid, writes its report and returns the rows.
#[pyfunction]
#[pyo3(signature = (config, jobs=1))]
fn grid<'py>(py: Python<'py>, config: &PyConfig, jobs: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let c = &config.inner;
    let (report, files) = py.detach(|| pipeline::grid(c, &c.output_dir(), jobs.max(1))).py_err()?;
    recorded(c, "grid", files)?;
    report
        .rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("encoder", r.encoder.as_str())?;
            d.set_item("framework", r.framework.as_str())?;
            d.set_item("label_ratio", r.label_ratio)?;
            d.set_item("train_domain", r.train_domain.as_str())?;
            d.set_item("test_domain", r.test_domain.as_str())?;
            d.set_item("accuracy", r.accuracy)?;
            d.set_item("macro_f1", r.macro_f1)?;
            d.set_item("seed", r.seed)?;
            Ok(d)
        })
        .collect()
}

/// Re-renders grid.md and the plots from the CSV files in `directory`.
#[pyfunction]
fn report(directory: PathBuf) -> PyResult<Vec<String>> {
    Ok(paths(pipeline::report(Path::new(&directory)).py_err()?))
}

#[pymodule]
pub fn vibefm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("VibefmError", m.py().get_type::<VibefmError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PySegment>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(separability_probe, m)?)?;
    m.add_function(wrap_pyfunction!(stft, m)?)?;
    m.add_function(wrap_pyfunction!(negate, m)?)?;
    m.add_function(wrap_pyfunction!(horizontal_flip, m)?)?;
    m.add_function(wrap_pyfunction!(permutation, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(split, m)?)?;
    m.add_function(wrap_pyfunction!(subsample, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(grid, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    Ok(())
}
