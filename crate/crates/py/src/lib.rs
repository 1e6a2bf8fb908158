//! Python bindings. Reports cross the boundary as JSON strings; images as
//! flat row-major lists.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use slgnet::harness::{self, checkpoint, CaptionPolicy, ConditionMix, RunConfig, TrainMode};
use slgnet::Tensor;

fn py_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn config_from(config_json: Option<&str>) -> PyResult<RunConfig> {
    match config_json {
        Some(s) => serde_json::from_str(s).map_err(py_err),
        None => Ok(RunConfig::default()),
    }
}

/// Finite-difference gradient check; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (module = "all", seed = 0))]
fn gradcheck(py: Python<'_>, module: &str, seed: u64) -> PyResult<String> {
    let module = module.to_string();
    let report = py.detach(move || harness::gradcheck(&module, seed)).map_err(py_err)?;
    serde_json::to_string(&report).map_err(py_err)
}

/// Trains one mode and returns the training report as JSON. When
/// `checkpoint_path` is given the trained model is saved there.
#[pyfunction]
#[pyo3(signature = (mode, config_json = None, checkpoint_path = None))]
fn train(py: Python<'_>, mode: &str, config_json: Option<&str>, checkpoint_path: Option<String>) -> PyResult<String> {
    let mode: TrainMode = mode.parse().map_err(py_err)?;
    let cfg = config_from(config_json)?;
    py.detach(move || -> slgnet::Result<String> {
        let (model, _, report) = cfg.run(mode)?;
        if let Some(path) = checkpoint_path {
            let part = harness::partition(&model, mode)?;
            checkpoint::save_run(path.as_ref(), &model, &part, &checkpoint::RunMeta { mode, config: cfg })?;
        }
        Ok(serde_json::to_string(&report)?)
    })
    .map_err(py_err)
}

/// Re-evaluates a saved run on its validation set; returns metrics as JSON.
#[pyfunction]
fn evaluate(py: Python<'_>, checkpoint_path: String) -> PyResult<String> {
    py.detach(move || -> slgnet::Result<String> {
        let (model, _, meta) = checkpoint::load_run(checkpoint_path.as_ref())?;
        let val = meta.config.val_set()?;
        let metrics = harness::evaluate(&model, &val, meta.mode.pathways(), meta.config.batch_size)?;
        Ok(serde_json::to_string(&metrics)?)
    })
    .map_err(py_err)
}

#[pyfunction]
fn average_precision(scores: Vec<f64>, labels: Vec<f64>) -> PyResult<f64> {
    if scores.len() != labels.len() {
        return Err(PyValueError::new_err(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    Ok(harness::average_precision(&scores, &labels))
}

/// Synthetic samples as dicts with `condition`, `caption`, `heatmap`,
/// `visible` (3·H·W) and `thermal` (H·W).
#[pyfunction]
#[pyo3(signature = (n, seed = 0, image_size = 64, cell = 8, policy = "structured"))]
fn synthesize<'py>(
    py: Python<'py>,
    n: usize,
    seed: u64,
    image_size: usize,
    cell: usize,
    policy: &str,
) -> PyResult<Vec<Bound<'py, pyo3::types::PyDict>>> {
    let policy: CaptionPolicy = policy.parse().map_err(py_err)?;
    let cfg = harness::data::SynthConfig { image_size, cell };
    let samples = harness::synthesize(n, ConditionMix::default(), seed, &cfg, policy).map_err(py_err)?;
    samples
        .into_iter()
        .map(|s| {
            let d = pyo3::types::PyDict::new(py);
            d.set_item("id", s.id)?;
            d.set_item("condition", s.condition.name())?;
            d.set_item("caption", s.caption.slots().map(|x| x.to_string()).to_vec())?;
            d.set_item("heatmap", s.heatmap)?;
            d.set_item("visible", s.visible.data().to_vec())?;
            d.set_item("thermal", s.thermal.data().to_vec())?;
            Ok(d)
        })
        .collect()
}

/// `(name, h, w, row-major data)`
type NamedMap = (String, usize, usize, Vec<f64>);

/// Structure-encoder diagnostic maps for one visible/thermal pair, using a
/// freshly initialised encoder from `seed`.
#[pyfunction]
#[pyo3(signature = (visible, thermal, size, seed = 0))]
fn structure_maps(visible: Vec<f64>, thermal: Vec<f64>, size: usize, seed: u64) -> PyResult<Vec<NamedMap>> {
    let cfg = RunConfig { image_size: size, seed, ..RunConfig::default() };
    let model = cfg.build_model().map_err(py_err)?;
    let v = Tensor::new(vec![1, 3, size, size], visible).map_err(py_err)?;
    let t = Tensor::new(vec![1, 1, size, size], thermal).map_err(py_err)?;
    let maps = slgnet::structure::structure_maps(&model.encoder, &model.store, &v, &t).map_err(py_err)?;
    Ok(maps.into_iter().map(|(name, m)| (name, m.shape()[0], m.shape()[1], m.data().to_vec())).collect())
}

#[pymodule]
fn slgnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(structure_maps, m)?)?;
    m.add("TRAIN_MODES", TrainMode::ALL.map(|t| t.name()).to_vec())?;
    Ok(())
}
