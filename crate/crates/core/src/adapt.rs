//! Test-time adaptation engine.
//!
//! Two parameter lifecycles coexist:
//!
//! * single-image adaptation (IA) copies the current parameters into a
//!   [`Session`], takes `ia_steps` Adam steps after every click and throws the
//!   copy away once the object is done;
//! * sequence adaptation (SA) keeps one [`SequenceAdapter`] for the whole
//!   test stream and takes one Adam step per finished image.
//!
//! The snapshot θ* and the importance weights Ω are shared, read-only inputs
//! of both.

use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{iou, Dataset};
use crate::graph::{Gradients, Graph};
use crate::guidance::{assemble_input, encode_guidance, Click, CorrectionState, DEFAULT_RADIUS};
use crate::losses::{adapt_loss_var, ce_loss_var, mas_importance, AdaptLossConfig, ImportanceSet};
use crate::params::ParamSet;
use crate::segnet::{Architecture, Prediction, SegNet};
use crate::tensor::{Tensor, TensorError};
use crate::usersim::{iterative_correction_round, sample_train_corrections, simulate_click, TrainClickConfig};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-click learning rate calibrated for the default desk-scale network.
pub const DESK_LEARNING_RATE: f64 = 1e-4;
/// Sequence learning rate calibrated for the default desk-scale network.
pub const DESK_SA_LEARNING_RATE: f64 = 2e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub ia_steps: usize,
    pub ia_lambda: f64,
    pub ia_gamma: f64,
    pub sa_lambda: f64,
    pub sa_gamma: f64,
    pub learning_rate: f64,
    /// Learning rate of sequence steps; falls back to `learning_rate`.
    pub sa_learning_rate: Option<f64>,
    pub click_budget: usize,
    pub target_iou: f64,
    pub disk_radius: usize,
    pub subsample_fraction: f64,
    /// Removes the correction term from the adaptation loss (ablation).
    pub ablate_corrections: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            ia_steps: 10,
            ia_lambda: 1.0,
            ia_gamma: 1.0,
            sa_lambda: 0.5,
            sa_gamma: 2.0,
            learning_rate: DESK_LEARNING_RATE,
            sa_learning_rate: Some(DESK_SA_LEARNING_RATE),
            click_budget: 20,
            target_iou: 0.9,
            disk_radius: DEFAULT_RADIUS,
            subsample_fraction: 0.5,
            ablate_corrections: false,
        }
    }
}

impl AdaptConfig {
    /// Learning rate used with a large pretrained backbone.
    pub fn pretrained_backbone() -> Self {
        Self {
            learning_rate: 1e-6,
            sa_learning_rate: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.click_budget == 0 {
            return Err(Error::Config("click_budget must be at least 1".into()));
        }
        if !(self.target_iou > 0.0 && self.target_iou <= 1.0) {
            return Err(Error::Config(format!("target_iou {} outside (0, 1]", self.target_iou)));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "subsample_fraction {} outside (0, 1]",
                self.subsample_fraction
            )));
        }
        let lr_ok = |lr: f64| lr > 0.0 && lr.is_finite();
        if !lr_ok(self.learning_rate) || !self.sa_learning_rate.is_none_or(lr_ok) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        self.ia_loss().validate()?;
        self.sa_loss().validate()
    }

    pub fn ia_loss(&self) -> AdaptLossConfig {
        AdaptLossConfig {
            lambda: self.ia_lambda,
            gamma: self.ia_gamma,
            without_corrections: self.ablate_corrections,
        }
    }

    pub fn sa_loss(&self) -> AdaptLossConfig {
        AdaptLossConfig {
            lambda: self.sa_lambda,
            gamma: self.sa_gamma,
            without_corrections: self.ablate_corrections,
        }
    }

    pub fn sa_rate(&self) -> f64 {
        self.sa_learning_rate.unwrap_or(self.learning_rate)
    }
}

/// Adam moment accumulators mirroring a parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: ParamSet,
    pub second: ParamSet,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }

    /// Applies one bias-corrected Adam update in place.
    pub fn apply(&mut self, theta: &mut ParamSet, grads: &Gradients, lr: f64) -> Result<()> {
        theta.check_layout(&self.first, "adam")?;
        if grads.len() != theta.len() {
            return Err(Error::Config(format!(
                "{} gradients for {} parameters",
                grads.len(),
                theta.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let moments = self.first.iter_mut().zip(self.second.iter_mut());
        for ((name, p), ((_, m), (_, v))) in theta.iter_mut().zip(moments) {
            let g = grads.get(name).ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            g.expect_shape("adam", p.shape())?;
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * gi;
                vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let m_hat = md[i] / c1;
                let v_hat = vd[i] / c2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
            if pd.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "adam" }.into());
            }
        }
        Ok(())
    }
}

/// Pure form of [`AdamState::apply`].
pub fn adam_step(theta: &ParamSet, grads: &Gradients, state: &AdamState, lr: f64) -> Result<(ParamSet, AdamState)> {
    let mut theta = theta.clone();
    let mut state = state.clone();
    state.apply(&mut theta, grads, lr)?;
    Ok((theta, state))
}

/// One record of the adaptation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub phase: Phase,
    pub image: Option<String>,
    pub step: usize,
    pub loss: f64,
    pub corrections: Option<f64>,
    pub anchor: Option<f64>,
    pub penalty: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Ia,
    Sa,
}

/// Collected adaptation log, writable as JSON lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdaptLog {
    pub entries: Vec<LogEntry>,
}

impl AdaptLog {
    pub fn count(&self, phase: Phase) -> usize {
        self.entries.iter().filter(|e| e.phase == phase).count()
    }

    pub fn write_jsonl(&self, mut out: impl std::io::Write) -> Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Shared read-only state: the snapshot θ*, its importance Ω and the
/// architecture.
#[derive(Debug, Clone)]
pub struct Anchor {
    pub arch: Architecture,
    pub theta_star: Arc<ParamSet>,
    pub omega: Arc<ImportanceSet>,
}

impl Anchor {
    pub fn new(net: &SegNet, omega: ImportanceSet) -> Result<Self> {
        net.params.check_layout(omega.as_params(), "anchor")?;
        Ok(Self {
            arch: net.arch.clone(),
            theta_star: Arc::new(net.params.clone()),
            omega: Arc::new(omega),
        })
    }

    pub fn frozen_net(&self) -> SegNet {
        SegNet {
            arch: self.arch.clone(),
            params: (*self.theta_star).clone(),
        }
    }
}

/// Loss values of one gradient step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub corrections: Option<f64>,
    pub anchor: Option<f64>,
    pub penalty: Option<f64>,
}

/// One Adam step on the combined adaptation loss.
#[allow(clippy::too_many_arguments)]
fn adapt_step(
    net: &mut SegNet,
    adam: &mut AdamState,
    x: &Tensor,
    p0: &Prediction,
    corrections: &Tensor,
    anchor: &Anchor,
    loss_cfg: &AdaptLossConfig,
    lr: f64,
) -> Result<StepLosses> {
    let mut g = Graph::new();
    let vars = net.params.register(&mut g, true);
    let xv = g.constant(x.clone());
    let probs = net.forward(&mut g, &vars, xv)?;
    let terms = adapt_loss_var(
        &mut g,
        probs,
        p0,
        corrections,
        &vars,
        &anchor.theta_star,
        &anchor.omega,
        loss_cfg,
    )?;
    let grads = g.backward(terms.total)?;
    let value = |v: Option<crate::graph::Var>| v.map(|v| g.value(v).data()[0]);
    let losses = StepLosses {
        total: g.value(terms.total).data()[0],
        corrections: value(terms.corrections),
        anchor: value(terms.anchor),
        penalty: value(terms.penalty),
    };
    adam.apply(&mut net.params, &grads, lr)?;
    Ok(losses)
}

pub fn model_input(image: &Tensor, clicks: &[Click], radius: usize) -> Result<Tensor> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    assemble_input(image, &encode_guidance(clicks, h, w, radius)?)
}

/// Source of corrections for an interactive segmentation loop.
pub trait ClickSource {
    fn next_click(&mut self, pred: &Prediction, state: &CorrectionState) -> Result<Option<Click>>;
}

/// The test-time simulated user driven by a ground-truth mask.
pub struct SimulatedUser<'a> {
    pub gt: &'a Tensor,
}

impl ClickSource for SimulatedUser<'_> {
    fn next_click(&mut self, pred: &Prediction, _state: &CorrectionState) -> Result<Option<Click>> {
        simulate_click(pred, self.gt)
    }
}

/// Per-object interactive segmentation state.
///
/// The session owns a working copy of the parameters; θ* and Ω are shared
/// through the [`Anchor`]. Moments of the optimizer persist across the
/// clicks of one object and start from zero for every new session.
pub struct Session {
    pub id: Option<String>,
    image: Tensor,
    gt: Option<Tensor>,
    net: SegNet,
    anchor: Anchor,
    corrections: CorrectionState,
    history: Vec<Prediction>,
    adam: AdamState,
    cfg: AdaptConfig,
    ia_enabled: bool,
    log: AdaptLog,
}

impl Session {
    /// Starts a session from `start` (θ* or the current sequence parameters).
    pub fn new(
        start: &SegNet,
        anchor: Anchor,
        image: Tensor,
        gt: Option<Tensor>,
        cfg: AdaptConfig,
        ia_enabled: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let size = start.arch.input_size;
        image.expect_shape("session", &[3, size, size])?;
        if let Some(gt) = &gt {
            gt.expect_shape("session", &[size, size])?;
        }
        let net = start.clone();
        let mut session = Self {
            id: None,
            adam: AdamState::new(&net.params),
            corrections: CorrectionState::new(size, size),
            image,
            gt,
            net,
            anchor,
            history: Vec::new(),
            cfg,
            ia_enabled,
            log: AdaptLog::default(),
        };
        let first = session.predict()?;
        session.history.push(first);
        Ok(session)
    }

    pub fn predict(&self) -> Result<Prediction> {
        let x = model_input(&self.image, self.corrections.clicks(), self.cfg.disk_radius)?;
        self.net.predict(&x)
    }

    pub fn latest(&self) -> &Prediction {
        self.history.last().expect("session always has a prediction")
    }

    pub fn history(&self) -> &[Prediction] {
        &self.history
    }

    pub fn corrections(&self) -> &CorrectionState {
        &self.corrections
    }

    pub fn image(&self) -> &Tensor {
        &self.image
    }

    pub fn ground_truth(&self) -> Option<&Tensor> {
        self.gt.as_ref()
    }

    pub fn params(&self) -> &ParamSet {
        &self.net.params
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.cfg
    }

    pub fn ia_enabled(&self) -> bool {
        self.ia_enabled
    }

    pub fn take_log(&mut self) -> AdaptLog {
        std::mem::take(&mut self.log)
    }

    pub fn current_iou(&self) -> Option<f64> {
        self.gt.as_ref().map(|gt| iou(&self.latest().binary, gt).expect("shapes checked"))
    }

    /// Records a click, adapts the working parameters when IA is enabled and
    /// returns the new prediction.
    ///
    /// The anchor prediction of the adaptation loss is taken after the
    /// guidance update and before the first gradient step.
    pub fn apply_click(&mut self, click: Click) -> Result<&Prediction> {
        if self.corrections.len() >= self.cfg.click_budget {
            return Err(Error::BudgetExhausted(self.cfg.click_budget));
        }
        self.corrections.push(click)?;
        let x = model_input(&self.image, self.corrections.clicks(), self.cfg.disk_radius)?;
        let p0 = self.net.predict(&x)?;
        let mut latest = p0.clone();
        if self.ia_enabled && self.cfg.ia_steps > 0 {
            let loss_cfg = self.cfg.ia_loss();
            for step in 0..self.cfg.ia_steps {
                let losses = adapt_step(
                    &mut self.net,
                    &mut self.adam,
                    &x,
                    &p0,
                    self.corrections.map(),
                    &self.anchor,
                    &loss_cfg,
                    self.cfg.learning_rate,
                )?;
                self.log.entries.push(LogEntry {
                    phase: Phase::Ia,
                    image: self.id.clone(),
                    step,
                    loss: losses.total,
                    corrections: losses.corrections,
                    anchor: losses.anchor,
                    penalty: losses.penalty,
                    iou: None,
                });
            }
            latest = self.net.predict(&x)?;
        }
        if let (Some(entry), Some(gt)) = (self.log.entries.last_mut(), &self.gt) {
            entry.iou = Some(iou(&latest.binary, gt)?);
        }
        self.history.push(latest);
        Ok(self.latest())
    }

    /// Hands over the material for a sequence step and drops the working θ.
    pub fn finish(self) -> ImageRecord {
        ImageRecord {
            id: self.id.clone(),
            image: self.image,
            corrections: self.corrections,
            final_prediction: self.history.last().cloned().expect("non-empty history"),
        }
    }
}

/// Everything sequence adaptation needs from a finished image.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub id: Option<String>,
    pub image: Tensor,
    pub corrections: CorrectionState,
    /// Mask at the end of the interaction; target of the anchor term.
    pub final_prediction: Prediction,
}

/// Result of one interactive segmentation.
#[derive(Debug, Clone)]
pub struct ImageOutcome {
    pub prediction: Prediction,
    pub clicks_used: usize,
    pub final_iou: Option<f64>,
    /// IoU after `k` clicks for `k = 0..=clicks_used`.
    pub iou_curve: Vec<f64>,
}

/// Runs the predict/correct loop until the target IoU is met, the budget is
/// spent or the click source stops.
pub fn single_image_adapt(session: &mut Session, source: &mut dyn ClickSource) -> Result<ImageOutcome> {
    let budget = session.cfg.click_budget;
    let target = session.cfg.target_iou;
    let mut curve = Vec::new();
    loop {
        let current = session.current_iou();
        if let Some(j) = current {
            curve.push(j);
            if j >= target {
                break;
            }
        }
        if session.corrections.len() >= budget {
            break;
        }
        let Some(click) = source.next_click(session.latest(), &session.corrections)? else {
            break;
        };
        session.apply_click(click)?;
    }
    Ok(ImageOutcome {
        prediction: session.latest().clone(),
        clicks_used: session.corrections.len(),
        final_iou: curve.last().copied(),
        iou_curve: curve,
    })
}

/// Online parameters θ_t of sequence adaptation.
pub struct SequenceAdapter {
    net: SegNet,
    anchor: Anchor,
    adam: AdamState,
    steps: usize,
    log: AdaptLog,
}

impl SequenceAdapter {
    pub fn new(anchor: Anchor) -> Self {
        let net = anchor.frozen_net();
        Self {
            adam: AdamState::new(&net.params),
            net,
            anchor,
            steps: 0,
            log: AdaptLog::default(),
        }
    }

    pub fn net(&self) -> &SegNet {
        &self.net
    }

    pub fn anchor(&self) -> &Anchor {
        &self.anchor
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn take_log(&mut self) -> AdaptLog {
        std::mem::take(&mut self.log)
    }

    /// One Adam step on a finished image. Guidance is built from a random
    /// subset of `ceil(fraction · n)` clicks while the correction term uses
    /// all `n`. Returns `false` (and leaves θ_t untouched) when the image has
    /// no clicks.
    pub fn step<R: Rng + ?Sized>(&mut self, record: &ImageRecord, cfg: &AdaptConfig, rng: &mut R) -> Result<bool> {
        let clicks = record.corrections.clicks();
        if clicks.is_empty() {
            log::info!("sequence step skipped: image {:?} has no clicks", record.id);
            return Ok(false);
        }
        let guidance = subsample_clicks(clicks, cfg.subsample_fraction, rng);
        let x = model_input(&record.image, &guidance, cfg.disk_radius)?;
        let losses = adapt_step(
            &mut self.net,
            &mut self.adam,
            &x,
            &record.final_prediction,
            record.corrections.map(),
            &self.anchor,
            &cfg.sa_loss(),
            cfg.sa_rate(),
        )?;
        self.log.entries.push(LogEntry {
            phase: Phase::Sa,
            image: record.id.clone(),
            step: self.steps,
            loss: losses.total,
            corrections: losses.corrections,
            anchor: losses.anchor,
            penalty: losses.penalty,
            iou: None,
        });
        self.steps += 1;
        Ok(true)
    }
}

/// Random subset of `ceil(fraction · n)` clicks (at least one), original order kept.
pub fn subsample_clicks<R: Rng + ?Sized>(clicks: &[Click], fraction: f64, rng: &mut R) -> Vec<Click> {
    let n = clicks.len();
    if n == 0 {
        return Vec::new();
    }
    let k = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut picked = index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| clicks[i]).collect()
}

/// Free-function form of [`SequenceAdapter::step`].
pub fn sequence_adapt_step<R: Rng + ?Sized>(
    adapter: &mut SequenceAdapter,
    record: &ImageRecord,
    cfg: &AdaptConfig,
    rng: &mut R,
) -> Result<bool> {
    adapter.step(record, cfg, rng)
}

/// Which adaptation procedures run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Frozen,
    Ia,
    Sa,
    #[serde(rename = "ia+sa")]
    IaSa,
}

impl Mode {
    pub fn uses_ia(self) -> bool {
        matches!(self, Mode::Ia | Mode::IaSa)
    }

    pub fn uses_sa(self) -> bool {
        matches!(self, Mode::Sa | Mode::IaSa)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Frozen => "frozen",
            Mode::Ia => "ia",
            Mode::Sa => "sa",
            Mode::IaSa => "ia+sa",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "frozen" => Ok(Mode::Frozen),
            "ia" => Ok(Mode::Ia),
            "sa" => Ok(Mode::Sa),
            "ia+sa" | "iasa" | "ia_sa" => Ok(Mode::IaSa),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// One image of a test sequence with its ground truth.
#[derive(Debug, Clone)]
pub struct SequenceItem<'a> {
    pub id: &'a str,
    pub image: &'a Tensor,
    pub gt: &'a Tensor,
}

#[derive(Debug, Clone)]
pub struct SequenceResult {
    pub outcomes: Vec<ImageOutcome>,
    /// θ_0, θ_1, ... after each image (only when requested).
    pub trajectory: Vec<ParamSet>,
    pub log: AdaptLog,
}

/// Segments a sequence image by image with the simulated user. IA (when
/// enabled) starts from the current θ_t; afterwards the image's clicks feed
/// one sequence step (when enabled). IA's own parameter changes never leave
/// the image.
pub fn combined_adapt<R: Rng + ?Sized>(
    sequence: &[SequenceItem<'_>],
    anchor: &Anchor,
    mode: Mode,
    cfg: &AdaptConfig,
    rng: &mut R,
    keep_trajectory: bool,
) -> Result<SequenceResult> {
    if sequence.is_empty() {
        return Err(Error::Dataset("empty sequence".into()));
    }
    cfg.validate()?;
    let mut adapter = SequenceAdapter::new(anchor.clone());
    let mut outcomes = Vec::with_capacity(sequence.len());
    let mut log = AdaptLog::default();
    let mut trajectory = Vec::new();
    if keep_trajectory {
        trajectory.push(adapter.net().params.clone());
    }
    for item in sequence {
        let mut session = Session::new(
            adapter.net(),
            anchor.clone(),
            item.image.clone(),
            Some(item.gt.clone()),
            cfg.clone(),
            mode.uses_ia(),
        )?;
        session.id = Some(item.id.to_string());
        let outcome = single_image_adapt(&mut session, &mut SimulatedUser { gt: item.gt })?;
        log.entries.extend(session.take_log().entries);
        let record = session.finish();
        if mode.uses_sa() {
            adapter.step(&record, cfg, rng)?;
            log.entries.extend(adapter.take_log().entries);
        }
        if keep_trajectory {
            trajectory.push(adapter.net().params.clone());
        }
        outcomes.push(outcome);
    }
    Ok(SequenceResult {
        outcomes,
        trajectory,
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub learning_rate: f64,
    pub reset_prob: f64,
    pub disk_radius: usize,
    pub clicks: TrainClickConfig,
    /// Inputs (empty guidance) used to estimate the importance weights.
    pub importance_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::default(),
            stage1_epochs: 10,
            stage2_epochs: 10,
            learning_rate: 3e-3,
            reset_prob: 0.3,
            disk_radius: DEFAULT_RADIUS,
            clicks: TrainClickConfig::default(),
            importance_samples: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: SegNet,
    pub importance: ImportanceSet,
    /// Mean dense cross-entropy per epoch, stage one then stage two.
    pub epoch_losses: Vec<f64>,
}

fn ce_step(net: &mut SegNet, adam: &mut AdamState, x: &Tensor, y: &Tensor, lr: f64) -> Result<f64> {
    let mut g = Graph::new();
    let vars = net.params.register(&mut g, true);
    let xv = g.constant(x.clone());
    let probs = net.forward(&mut g, &vars, xv)?;
    let loss = ce_loss_var(&mut g, probs, y)?;
    let grads = g.backward(loss)?;
    let value = g.value(loss).data()[0];
    adam.apply(&mut net.params, &grads, lr)?;
    Ok(value)
}

/// Trains θ* with dense cross-entropy: first on sampled corrections, then
/// with iteratively simulated ones. Also estimates Ω on the trained model.
pub fn train_base(dataset: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = SegNet::build(cfg.arch.clone(), rng.random())?;
    let size = cfg.arch.input_size;
    for s in dataset.samples() {
        s.image.expect_shape("train_base", &[3, size, size])?;
    }
    let mut adam = AdamState::new(&net.params);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::new();

    for epoch in 0..cfg.stage1_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let s = &dataset.samples()[i];
            let state = sample_train_corrections(&s.mask, s.others.as_ref(), &mut rng, &cfg.clicks)?;
            let x = model_input(&s.image, state.clicks(), cfg.disk_radius)?;
            total += ce_step(&mut net, &mut adam, &x, &s.mask, cfg.learning_rate)?;
        }
        let mean = total / dataset.len() as f64;
        log::info!("stage 1 epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }

    let mut states = dataset
        .samples()
        .iter()
        .map(|s| sample_train_corrections(&s.mask, s.others.as_ref(), &mut rng, &cfg.clicks))
        .collect::<Result<Vec<_>>>()?;
    for epoch in 0..cfg.stage2_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let s = &dataset.samples()[i];
            let x = model_input(&s.image, states[i].clicks(), cfg.disk_radius)?;
            let pred = net.predict(&x)?;
            states[i] = iterative_correction_round(&states[i], &pred, &s.mask, &mut rng, cfg.reset_prob)?;
            let x = model_input(&s.image, states[i].clicks(), cfg.disk_radius)?;
            total += ce_step(&mut net, &mut adam, &x, &s.mask, cfg.learning_rate)?;
        }
        let mean = total / dataset.len() as f64;
        log::info!("stage 2 epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }

    let importance = default_importance(&net, dataset, cfg.importance_samples, cfg.disk_radius)?;
    Ok(TrainOutcome {
        net,
        importance,
        epoch_losses,
    })
}

/// Ω estimated on the first `n` dataset images with empty guidance.
pub fn default_importance(net: &SegNet, dataset: &Dataset, n: usize, radius: usize) -> Result<ImportanceSet> {
    let samples = dataset
        .samples()
        .iter()
        .take(n.max(1))
        .map(|s| model_input(&s.image, &[], radius))
        .collect::<Result<Vec<_>>>()?;
    mas_importance(net, &samples)
}
