//! Python bindings.
//!
//! Images cross the boundary as nested lists: `[3][H][W]` floats in `[0, 1]`
//! for RGB, `[H][W]` for masks and probability maps. Clicks are
//! `(row, col, label)` tuples with label `"positive"` or `"negative"`.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use clickadapt::adapt::SimulatedUser;
use clickadapt::eval::{checkpoint_id, synth_dataset as core_synth, Sample};
use clickadapt::{
    model_input, single_image_adapt, AdaptConfig, Anchor, Architecture, Checkpoint, Click, Dataset, ImportanceSet,
    Label, Mode, Prediction, SegNet, SequenceAdapter, Tensor, TrainConfig,
};

fn py_err(e: clickadapt::Error) -> PyErr {
    match e {
        clickadapt::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn or_py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for clickadapt::Result<T> {
    fn or_py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn tensor2(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("ragged 2-D list"));
    }
    Tensor::new(vec![h, w], rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn tensor3(planes: Vec<Vec<Vec<f64>>>) -> PyResult<Tensor> {
    let c = planes.len();
    let mut data = Vec::new();
    let mut hw = None;
    for p in planes {
        let t = tensor2(p)?;
        if *hw.get_or_insert(t.shape().to_vec()) != t.shape() {
            return Err(PyValueError::new_err("channels differ in shape"));
        }
        data.extend_from_slice(t.data());
    }
    let hw = hw.unwrap_or_else(|| vec![0, 0]);
    Tensor::new(vec![c, hw[0], hw[1]], data).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let w = t.shape()[t.rank() - 1].max(1);
    t.data().chunks(w).map(<[f64]>::to_vec).collect()
}

fn planes(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    t.data()
        .chunks(h * w)
        .map(|p| p.chunks(w).map(<[f64]>::to_vec).collect())
        .collect()
}

fn parse_label(s: &str) -> PyResult<Label> {
    match s {
        "positive" | "pos" | "+" => Ok(Label::Positive),
        "negative" | "neg" | "-" => Ok(Label::Negative),
        other => Err(PyValueError::new_err(format!("unknown label `{other}`"))),
    }
}

fn label_str(l: Label) -> &'static str {
    match l {
        Label::Positive => "positive",
        Label::Negative => "negative",
    }
}

fn parse_clicks(clicks: Vec<(usize, usize, String)>) -> PyResult<Vec<Click>> {
    clicks
        .into_iter()
        .map(|(r, c, l)| Ok(Click::new(r, c, parse_label(&l)?)))
        .collect()
}

fn parse_config(config: Option<&str>) -> PyResult<AdaptConfig> {
    let cfg: AdaptConfig = match config {
        Some(json) => serde_json::from_str(json).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => AdaptConfig::default(),
    };
    cfg.validate().or_py()?;
    Ok(cfg)
}

fn anchor_of(ckpt: &Checkpoint) -> PyResult<Anchor> {
    let omega = ckpt
        .importance
        .clone()
        .unwrap_or_else(|| ImportanceSet::ones_like(&ckpt.net.params));
    Anchor::new(&ckpt.net, omega).or_py()
}

/// Probability map and its thresholded mask.
#[pyclass(name = "Prediction", module = "clickadapt_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPrediction(Prediction);

#[pymethods]
impl PyPrediction {
    #[getter]
    fn probabilities(&self) -> Vec<Vec<f64>> {
        rows(&self.0.probabilities)
    }

    #[getter]
    fn mask(&self) -> Vec<Vec<u8>> {
        rows(&self.0.binary)
            .into_iter()
            .map(|r| r.into_iter().map(|v| v as u8).collect())
            .collect()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.0.height(), self.0.width())
    }

    fn __repr__(&self) -> String {
        let fg = self.0.binary.data().iter().sum::<f64>();
        format!("Prediction({}x{}, foreground={fg})", self.0.height(), self.0.width())
    }
}

/// Network parameters plus optional importance weights.
#[pyclass(name = "Model", module = "clickadapt_py", skip_from_py_object)]
#[derive(Clone)]
struct PyModel(Checkpoint);

#[pymethods]
impl PyModel {
    /// Randomly initialised default network.
    #[new]
    #[pyo3(signature = (seed = 0))]
    fn new(seed: u64) -> PyResult<Self> {
        Ok(Self(Checkpoint::new(SegNet::build(Architecture::default(), seed).or_py()?, None)))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self(Checkpoint::load(path).or_py()?))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).or_py()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.0.net.arch.parameter_count()
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.0.net.arch.input_size
    }

    #[getter]
    fn has_importance(&self) -> bool {
        self.0.importance.is_some()
    }

    #[getter]
    fn checkpoint_id(&self) -> PyResult<String> {
        checkpoint_id(&self.0).or_py()
    }

    #[pyo3(signature = (image, clicks = Vec::new(), radius = 3))]
    fn predict(
        &self,
        py: Python<'_>,
        image: Vec<Vec<Vec<f64>>>,
        clicks: Vec<(usize, usize, String)>,
        radius: usize,
    ) -> PyResult<PyPrediction> {
        let image = tensor3(image)?;
        let clicks = parse_clicks(clicks)?;
        let net = &self.0.net;
        py.detach(|| model_input(&image, &clicks, radius).and_then(|x| net.predict(&x)))
            .or_py()
            .map(PyPrediction)
    }
}

/// One interactive segmentation of one image.
#[pyclass(name = "Session", module = "clickadapt_py")]
struct PySession {
    inner: Option<clickadapt::Session>,
    sa: bool,
}

impl PySession {
    fn get(&self) -> PyResult<&clickadapt::Session> {
        self.inner.as_ref().ok_or_else(|| PyValueError::new_err("session already finished"))
    }

    fn get_mut(&mut self) -> PyResult<&mut clickadapt::Session> {
        self.inner.as_mut().ok_or_else(|| PyValueError::new_err("session already finished"))
    }
}

#[pymethods]
impl PySession {
    /// `config` is a JSON object with adaptation settings.
    #[new]
    #[pyo3(signature = (model, image, gt = None, ia = true, sa = true, config = None))]
    fn new(
        model: &PyModel,
        image: Vec<Vec<Vec<f64>>>,
        gt: Option<Vec<Vec<f64>>>,
        ia: bool,
        sa: bool,
        config: Option<&str>,
    ) -> PyResult<Self> {
        let cfg = parse_config(config)?;
        let gt = gt.map(tensor2).transpose()?;
        let session =
            clickadapt::Session::new(&model.0.net, anchor_of(&model.0)?, tensor3(image)?, gt, cfg, ia).or_py()?;
        Ok(Self {
            inner: Some(session),
            sa,
        })
    }

    fn click(&mut self, py: Python<'_>, row: usize, col: usize, label: &str) -> PyResult<PyPrediction> {
        let click = Click::new(row, col, parse_label(label)?);
        let session = self.get_mut()?;
        py.detach(|| session.apply_click(click).cloned()).or_py().map(PyPrediction)
    }

    /// Runs the simulated user to the target IoU or the click budget.
    /// Returns `(clicks_used, final_iou, iou_curve)`.
    fn run_simulated(&mut self, py: Python<'_>) -> PyResult<(usize, Option<f64>, Vec<f64>)> {
        let session = self.get_mut()?;
        let gt = session
            .ground_truth()
            .cloned()
            .ok_or_else(|| PyValueError::new_err("session has no ground truth"))?;
        let out = py
            .detach(|| single_image_adapt(session, &mut SimulatedUser { gt: &gt }))
            .or_py()?;
        Ok((out.clicks_used, out.final_iou, out.iou_curve))
    }

    #[getter]
    fn prediction(&self) -> PyResult<PyPrediction> {
        Ok(PyPrediction(self.get()?.latest().clone()))
    }

    #[getter]
    fn clicks(&self) -> PyResult<Vec<(usize, usize, &'static str)>> {
        Ok(self
            .get()?
            .corrections()
            .clicks()
            .iter()
            .map(|c| (c.row, c.col, label_str(c.label)))
            .collect())
    }

    #[getter]
    fn iou(&self) -> PyResult<Option<f64>> {
        Ok(self.get()?.current_iou())
    }

    #[getter]
    fn finished(&self) -> bool {
        self.inner.is_none()
    }
}

/// Server-style sequence parameters θ_t updated once per finished session.
#[pyclass(name = "SequenceAdapter", module = "clickadapt_py")]
struct PySequenceAdapter {
    adapter: SequenceAdapter,
    cfg: AdaptConfig,
    rng: ChaCha8Rng,
    importance: Option<ImportanceSet>,
}

#[pymethods]
impl PySequenceAdapter {
    #[new]
    #[pyo3(signature = (model, seed = 0, config = None))]
    fn new(model: &PyModel, seed: u64, config: Option<&str>) -> PyResult<Self> {
        Ok(Self {
            adapter: SequenceAdapter::new(anchor_of(&model.0)?),
            cfg: parse_config(config)?,
            rng: ChaCha8Rng::seed_from_u64(seed),
            importance: model.0.importance.clone(),
        })
    }

    /// Current parameters, usable to start the next session.
    #[getter]
    fn model(&self) -> PyModel {
        PyModel(Checkpoint::new(self.adapter.net().clone(), self.importance.clone()))
    }

    #[getter]
    fn steps(&self) -> usize {
        self.adapter.steps()
    }

    /// Closes `session`; takes a sequence step when the session has SA
    /// enabled and at least one click. Returns whether a step was taken.
    fn finish(&mut self, py: Python<'_>, session: &mut PySession) -> PyResult<bool> {
        let inner = session
            .inner
            .take()
            .ok_or_else(|| PyValueError::new_err("session already finished"))?;
        if !session.sa {
            return Ok(false);
        }
        let record = inner.finish();
        let Self { adapter, cfg, rng, .. } = self;
        py.detach(|| adapter.step(&record, cfg, rng)).or_py()
    }
}

#[pyfunction]
fn iou(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    clickadapt::iou(&tensor2(a)?, &tensor2(b)?).or_py()
}

#[pyfunction]
#[pyo3(signature = (curve, q, budget = 20))]
fn clicks_at_q(curve: Vec<f64>, q: f64, budget: usize) -> PyResult<usize> {
    clickadapt::clicks_at_q(&curve, q, budget).or_py()
}

/// `[2][H][W]` guidance: positive disks, then negative disks.
#[pyfunction]
#[pyo3(signature = (clicks, height, width, radius = 3))]
fn encode_guidance(
    clicks: Vec<(usize, usize, String)>,
    height: usize,
    width: usize,
    radius: usize,
) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let g = clickadapt::encode_guidance(&parse_clicks(clicks)?, height, width, radius).or_py()?;
    Ok(planes(&g.channels))
}

/// Next simulated correction for a probability map, or `None` when the
/// thresholded map already equals the ground truth.
#[pyfunction]
fn simulate_click(probabilities: Vec<Vec<f64>>, gt: Vec<Vec<f64>>) -> PyResult<Option<(usize, usize, &'static str)>> {
    let pred = Prediction::from_probabilities(&tensor2(probabilities)?);
    let click = clickadapt::simulate_click(&pred, &tensor2(gt)?).or_py()?;
    Ok(click.map(|c| (c.row, c.col, label_str(c.label))))
}

#[pyfunction]
fn ce_loss(probabilities: Vec<Vec<f64>>, target: Vec<Vec<f64>>) -> PyResult<f64> {
    clickadapt::ce_loss(&tensor2(probabilities)?, &tensor2(target)?).or_py()
}

/// Cross-entropy over labelled pixels; `-1` marks unlabelled ones.
#[pyfunction]
fn gce_loss(probabilities: Vec<Vec<f64>>, corrections: Vec<Vec<f64>>) -> PyResult<f64> {
    clickadapt::gce_loss(&tensor2(probabilities)?, &tensor2(corrections)?).or_py()
}

type PySample = (String, Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>);

/// Synthetic `(id, image, mask)` triples.
#[pyfunction]
#[pyo3(signature = (spec, n, seed = 0, size = 64))]
fn synth_dataset(spec: &str, n: usize, seed: u64, size: usize) -> PyResult<Vec<PySample>> {
    let ds = core_synth(spec.parse().or_py()?, n, size, seed).or_py()?;
    Ok(ds
        .samples()
        .iter()
        .map(|s| (s.id.clone(), planes(&s.image), rows(&s.mask)))
        .collect())
}

fn dataset(samples: Vec<PySample>) -> PyResult<Dataset> {
    let samples = samples
        .into_iter()
        .map(|(id, image, mask)| {
            Ok(Sample {
                id,
                image: tensor3(image)?,
                mask: tensor2(mask)?,
                others: None,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    Dataset::new("python", samples).or_py()
}

/// Trains a base model; `config` is a JSON object of training settings.
#[pyfunction]
#[pyo3(signature = (samples, seed = 0, config = None))]
fn train(py: Python<'_>, samples: Vec<PySample>, seed: u64, config: Option<&str>) -> PyResult<(PyModel, Vec<f64>)> {
    let ds = dataset(samples)?;
    let cfg: TrainConfig = match config {
        Some(json) => serde_json::from_str(json).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => TrainConfig::default(),
    };
    let out = py.detach(|| clickadapt::train_base(&ds, &cfg, seed)).or_py()?;
    Ok((PyModel(Checkpoint::new(out.net, Some(out.importance))), out.epoch_losses))
}

/// Simulated-user evaluation; returns the report as a JSON string.
#[pyfunction]
#[pyo3(signature = (model, samples, mode = "frozen", seeds = vec![0], config = None))]
fn evaluate(
    py: Python<'_>,
    model: &PyModel,
    samples: Vec<PySample>,
    mode: &str,
    seeds: Vec<u64>,
    config: Option<&str>,
) -> PyResult<String> {
    let ds = dataset(samples)?;
    let mode: Mode = mode.parse().or_py()?;
    let cfg = parse_config(config)?;
    let ckpt = &model.0;
    let report = py
        .detach(|| clickadapt::evaluate_sequence(&ds, ckpt, mode, &cfg, &seeds))
        .or_py()?;
    serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn clickadapt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyPrediction>()?;
    m.add_class::<PySession>()?;
    m.add_class::<PySequenceAdapter>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(clicks_at_q, m)?)?;
    m.add_function(wrap_pyfunction!(encode_guidance, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_click, m)?)?;
    m.add_function(wrap_pyfunction!(ce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(gce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_lists_round_trip() {
        let t = tensor3(vec![vec![vec![0.1, 0.2], vec![0.3, 0.4]]; 3]).unwrap();
        assert_eq!(t.shape(), &[3, 2, 2]);
        assert_eq!(planes(&t)[2][1][0], 0.3);
        assert!(tensor2(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn labels_parse() {
        assert_eq!(parse_label("positive").unwrap(), Label::Positive);
        assert_eq!(parse_label("-").unwrap(), Label::Negative);
        assert!(parse_label("maybe").is_err());
    }
}
