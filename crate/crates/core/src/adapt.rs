//! Test-time training by idempotence.
//!
//! The live model's neutral prediction `y0 = f_θ(x, 0)` is pulled toward the
//! anchor's re-prediction `y1 = F(x, y0)`. In the offline and online modes
//! `y1` is a constant target: no gradient reaches the anchor's weights or
//! flows back through `y0`'s appearance inside the anchor's input. The naive
//! mode uses the live model for both applications and differentiates
//! through both.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diff::{Bindings, Graph, Optimizer, OptimizerKind, OptimizerSpec, ParamSnapshot, Tensor, Var};
use crate::dualnet::{DualInputModel, LossNorm, PredictionPair};
use crate::error::{Error, Result};
use crate::rng;
use crate::training::task_error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorKind {
    Frozen,
    Ema,
}

/// Parameters of the second application: a frozen post-training copy, or
/// an exponential moving average of the live model.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorState {
    kind: AnchorKind,
    params: ParamSnapshot,
    decay: f64,
}

impl AnchorState {
    pub fn frozen(model: &DualInputModel) -> Self {
        Self {
            kind: AnchorKind::Frozen,
            params: model.params().snapshot(),
            decay: 1.0,
        }
    }

    pub fn kind(&self) -> AnchorKind {
        self.kind
    }

    pub fn params(&self) -> &ParamSnapshot {
        &self.params
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }
}

pub fn make_ema_anchor(model: &DualInputModel, decay: f64) -> Result<AnchorState> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Contract(format!("EMA decay {decay} outside [0, 1]")));
    }
    Ok(AnchorState {
        kind: AnchorKind::Ema,
        params: model.params().snapshot(),
        decay,
    })
}

/// `anchor ← decay·anchor + (1 − decay)·model`, elementwise.
pub fn ema_update(anchor: &mut AnchorState, model: &DualInputModel) -> Result<()> {
    if anchor.kind != AnchorKind::Ema {
        return Err(Error::Contract("ema_update on a frozen anchor".into()));
    }
    model.params().check_layout(&anchor.params)?;
    let d = anchor.decay;
    for (a, m) in anchor.params.values_mut().zip(model.params().values()) {
        for (av, &mv) in a.data_mut().iter_mut().zip(m.data()) {
            *av = d * *av + (1.0 - d) * mv;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TttMode {
    Offline,
    Naive,
    Online,
}

fn default_steps() -> usize {
    3
}
fn default_lr() -> f64 {
    1e-3
}
fn default_opt() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_mode() -> TttMode {
    TttMode::Offline
}
fn default_decay() -> f64 {
    0.99
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TttConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_opt")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_mode")]
    pub mode: TttMode,
    #[serde(default)]
    pub loss_norm: LossNorm,
    /// EMA anchor decay for online mode.
    #[serde(default = "default_decay")]
    pub ema_decay: f64,
    /// Gradient path through the anchor in offline and online modes.
    #[serde(default)]
    pub gradient_cut: GradientCut,
}

impl TttConfig {
    pub fn new(mode: TttMode) -> Self {
        Self {
            steps: default_steps(),
            lr: default_lr(),
            optimizer: default_opt(),
            mode,
            loss_norm: LossNorm::L2,
            ema_decay: default_decay(),
            gradient_cut: GradientCut::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=50).contains(&self.steps) {
            return Err(Error::Config(format!("TTT steps {} outside [1, 50]", self.steps)));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("TTT learning rate {} must be ≥ 0", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("EMA decay {} outside [0, 1]", self.ema_decay)));
        }
        if self.gradient_cut == GradientCut::None && self.mode != TttMode::Naive {
            return Err(Error::Config(
                "gradient_cut `none` is the naive loss; use the it3_naive method instead".into(),
            ));
        }
        Ok(())
    }

    pub fn optimizer_spec(&self) -> OptimizerSpec {
        match self.optimizer {
            OptimizerKind::Sgd => OptimizerSpec::sgd(self.lr),
            OptimizerKind::Adam => OptimizerSpec::adam(self.lr),
        }
    }

    fn expect_mode(&self, mode: TttMode) -> Result<()> {
        self.validate()?;
        if self.mode != mode {
            return Err(Error::Contract(format!(
                "expected {mode:?} mode, config says {:?}",
                self.mode
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub loss_before: f64,
    pub loss_after: f64,
    pub y0_before: Tensor,
    pub y0_after: Tensor,
    pub steps_taken: usize,
    pub aborted: bool,
    /// Model applications needed to produce the prediction.
    pub forward_passes: usize,
    pub backward_passes: usize,
    /// Extra applications spent on the returned `y1` and `loss_after`.
    pub diagnostic_passes: usize,
}

/// Per-sample `‖y1 − y0‖₂`.
pub fn pair_distances(pair: &PredictionPair) -> Vec<f64> {
    let (a, b) = (pair.y0.as_matrix(), pair.y1.as_matrix());
    (0..a.rows())
        .map(|i| {
            a.row(i)
                .iter()
                .zip(b.row(i))
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

fn second_pass(model: &DualInputModel, anchor: Option<&AnchorState>, x: &Tensor, y0: &Tensor) -> Result<Tensor> {
    let aux = model.aux_from_prediction(y0);
    match anchor {
        Some(a) => model.infer_with(a.params.values(), x, &aux),
        None => model.infer(x, &aux),
    }
}

/// Prediction pair with `y1` from the anchor, or from the model itself
/// when no anchor is given.
pub fn anchored_pair(model: &DualInputModel, anchor: Option<&AnchorState>, x: &Tensor) -> Result<PredictionPair> {
    let y0 = model.predict_y0(x)?;
    let y1 = second_pass(model, anchor, x, &y0)?;
    Ok(PredictionPair { y0, y1 })
}

/// Per-sample idempotence errors `‖F(x, y0) − y0‖₂`.
pub fn idempotence_errors(model: &DualInputModel, anchor: Option<&AnchorState>, x: &Tensor) -> Result<Vec<f64>> {
    Ok(pair_distances(&anchored_pair(model, anchor, x)?))
}

/// Mean idempotence error over the rows of `x`.
pub fn idempotence_error(model: &DualInputModel, anchor: Option<&AnchorState>, x: &Tensor) -> Result<f64> {
    let d = idempotence_errors(model, anchor, x)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Which part of the second application is cut from the gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientCut {
    /// Nothing is cut: gradients flow through both applications.
    None,
    /// The second application's weights are constants; the gradient still
    /// reaches θ through `y0` as that application's input.
    AnchorWeights,
    /// `F(x, y0)` as a whole is a constant target; only the standalone `y0`
    /// term carries gradient.
    #[default]
    Target,
}

/// Test-time loss on `g`. `second` holds the parameters of the second
/// application, whose gradient path is limited by `cut`. Returns
/// `(y0, loss)`.
pub fn idempotence_loss_on(
    model: &DualInputModel,
    g: &mut Graph,
    live: &Bindings,
    second: &Bindings,
    x: &Tensor,
    norm: LossNorm,
    cut: GradientCut,
) -> Result<(Var, Var)> {
    let x = x.as_matrix();
    let xv = g.constant(x.clone());
    let neutral = g.constant(model.neutral().batch(x.rows()));
    let y0 = model.forward(g, live, xv, neutral)?;
    let aux = model.aux_from_prediction_var(g, y0)?;
    let frozen;
    let second = if cut == GradientCut::AnchorWeights {
        frozen = Bindings::from_vars(second.vars().iter().map(|&v| g.detach(v)).collect());
        &frozen
    } else {
        second
    };
    let y1 = model.forward(g, second, xv, aux)?;
    let target = model.aux_from_prediction_var(g, y1)?;
    let target = if cut == GradientCut::Target { g.detach(target) } else { target };
    let loss = model.discrepancy(g, y0, target, norm)?;
    Ok((y0, loss))
}

enum Second<'a> {
    Anchor(&'a ParamSnapshot, GradientCut),
    Live,
}

struct StepOutcome {
    y0: Tensor,
    loss: f64,
}

/// One gradient step. Returns `None` (parameters untouched) when the loss
/// or a gradient is non-finite.
fn ttt_step(
    model: &mut DualInputModel,
    second: &Second<'_>,
    x: &Tensor,
    norm: LossNorm,
    opt: &mut Optimizer,
) -> Result<Option<StepOutcome>> {
    let mut g = Graph::new();
    let live = model.params().bind(&mut g);
    let (y0, loss) = match second {
        // the target is a constant: run the anchor outside the tape
        Second::Anchor(snap, GradientCut::Target) => {
            let x = x.as_matrix();
            let xv = g.constant(x.clone());
            let neutral = g.constant(model.neutral().batch(x.rows()));
            let y0 = model.forward(&mut g, &live, xv, neutral)?;
            let aux = model.aux_from_prediction(g.value(y0));
            let y1 = model.infer_with(snap.values(), &x, &aux)?;
            let target = g.constant(model.aux_from_prediction(&y1));
            (y0, model.discrepancy(&mut g, y0, target, norm)?)
        }
        Second::Anchor(snap, cut) => {
            let anchor = snap.bind_constant(&mut g);
            idempotence_loss_on(model, &mut g, &live, &anchor, x, norm, *cut)?
        }
        Second::Live => idempotence_loss_on(model, &mut g, &live, &live, x, norm, GradientCut::None)?,
    };
    let lv = g.value(loss).item();
    let y0v = g.value(y0).clone();
    if !lv.is_finite() {
        return Ok(None);
    }
    let grads = g.backward(loss)?;
    model.params_mut().accumulate(&live, &grads);
    match opt.step(model.params_mut()) {
        Ok(()) => Ok(Some(StepOutcome { y0: y0v, loss: lv })),
        Err(Error::Numeric(_)) => {
            model.params_mut().zero_grad();
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn loss_value(model: &DualInputModel, y0: &Tensor, y1: &Tensor, norm: LossNorm) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(y0.as_matrix());
    let t = g.constant(model.aux_from_prediction(&y1.as_matrix()));
    let l = model.discrepancy(&mut g, a, t, norm)?;
    Ok(g.value(l).item())
}

/// Up to `cfg.steps` updates, then the final prediction. θ is left adapted.
fn run_steps(
    model: &mut DualInputModel,
    second: Second<'_>,
    diag_anchor: Option<&AnchorState>,
    x: &Tensor,
    cfg: &TttConfig,
    opt: &mut Optimizer,
) -> Result<(PredictionPair, EpisodeReport)> {
    let mut loss_before = f64::NAN;
    let mut y0_before = None;
    let mut steps_taken = 0;
    let mut forwards = 0;
    let mut aborted = false;
    for _ in 0..cfg.steps {
        forwards += 2;
        match ttt_step(model, &second, x, cfg.loss_norm, opt)? {
            Some(out) => {
                if y0_before.is_none() {
                    loss_before = out.loss;
                    y0_before = Some(out.y0);
                }
                steps_taken += 1;
            }
            None => {
                aborted = true;
                break;
            }
        }
    }
    forwards += 1;
    let y0_after = model.predict_y0(x)?;
    let y1 = second_pass(model, diag_anchor, x, &y0_after)?;
    let loss_after = loss_value(model, &y0_after, &y1, cfg.loss_norm)?;
    let report = EpisodeReport {
        loss_before,
        loss_after,
        y0_before: y0_before.unwrap_or_else(|| y0_after.clone()),
        y0_after: y0_after.clone(),
        steps_taken,
        aborted,
        forward_passes: forwards,
        backward_passes: steps_taken,
        diagnostic_passes: 1,
    };
    Ok((PredictionPair { y0: y0_after, y1 }, report))
}

/// Offline episode: `cfg.steps` updates of θ against the frozen anchor, a
/// final prediction, then θ is restored to its pre-episode value. Each
/// episode gets a fresh optimizer.
pub fn ttt_episode_offline(
    model: &mut DualInputModel,
    anchor: &AnchorState,
    x: &Tensor,
    cfg: &TttConfig,
) -> Result<(PredictionPair, EpisodeReport)> {
    cfg.expect_mode(TttMode::Offline)?;
    if anchor.kind != AnchorKind::Frozen {
        return Err(Error::Contract("offline episodes need a frozen anchor".into()));
    }
    model.params().check_layout(&anchor.params)?;
    let saved = model.params().snapshot();
    let mut opt = cfg.optimizer_spec().build();
    let out = run_steps(
        model,
        Second::Anchor(&anchor.params, cfg.gradient_cut),
        Some(anchor),
        x,
        cfg,
        &mut opt,
    );
    model.params_mut().restore(&saved)?;
    model.params_mut().zero_grad();
    out
}

/// Naive ablation: the live model supplies both applications and gradients
/// flow through both. Same reset semantics as the offline episode.
pub fn ttt_episode_naive(
    model: &mut DualInputModel,
    x: &Tensor,
    cfg: &TttConfig,
) -> Result<(PredictionPair, EpisodeReport)> {
    cfg.expect_mode(TttMode::Naive)?;
    let saved = model.params().snapshot();
    let mut opt = cfg.optimizer_spec().build();
    let out = run_steps(model, Second::Live, None, x, cfg, &mut opt);
    model.params_mut().restore(&saved)?;
    model.params_mut().zero_grad();
    out
}

/// Persistent state of online adaptation: EMA anchor and optimizer.
#[derive(Clone, Debug)]
pub struct OnlineState {
    pub anchor: AnchorState,
    pub optimizer: Optimizer,
}

impl OnlineState {
    pub fn new(model: &DualInputModel, cfg: &TttConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            anchor: make_ema_anchor(model, cfg.ema_decay)?,
            optimizer: cfg.optimizer_spec().build(),
        })
    }
}

/// Online step: like the offline episode against the EMA anchor, without
/// the reset. The anchor is updated after every gradient step.
pub fn online_step(
    model: &mut DualInputModel,
    state: &mut OnlineState,
    x: &Tensor,
    cfg: &TttConfig,
) -> Result<(PredictionPair, EpisodeReport)> {
    cfg.expect_mode(TttMode::Online)?;
    if state.anchor.kind != AnchorKind::Ema {
        return Err(Error::Contract("online adaptation needs an EMA anchor".into()));
    }
    let OnlineState { anchor, optimizer } = state;
    let mut forwards = 0;
    let mut backwards = 0;
    let mut first: Option<StepOutcome> = None;
    let mut aborted = false;
    for _ in 0..cfg.steps {
        forwards += 2;
        match ttt_step(model, &Second::Anchor(&anchor.params, cfg.gradient_cut), x, cfg.loss_norm, optimizer)? {
            Some(out) => {
                backwards += 1;
                ema_update(anchor, model)?;
                first.get_or_insert(out);
            }
            None => {
                aborted = true;
                break;
            }
        }
    }
    forwards += 1;
    let y0 = model.predict_y0(x)?;
    let y1 = second_pass(model, Some(anchor), x, &y0)?;
    let loss_after = loss_value(model, &y0, &y1, cfg.loss_norm)?;
    let (loss_before, y0_before) = match first {
        Some(out) => (out.loss, out.y0),
        None => (f64::NAN, y0.clone()),
    };
    let report = EpisodeReport {
        loss_before,
        loss_after,
        y0_before,
        y0_after: y0.clone(),
        steps_taken: backwards,
        aborted,
        forward_passes: forwards,
        backward_passes: backwards,
        diagnostic_passes: 1,
    };
    Ok((PredictionPair { y0, y1 }, report))
}

/// Measurements of the naive loss's failure modes on one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NaiveProbeReport {
    /// Mean `‖f(x, a) − a‖₂` for random `a` around `y0`; zero means
    /// `f(x, ·)` has collapsed to the identity.
    pub identity_gap_before: f64,
    pub identity_gap_after: f64,
    pub error_before: f64,
    pub error_after: f64,
    /// `error_after / error_before`; above 1 means the error grew.
    pub error_magnification: f64,
    pub steps: usize,
}

/// Mean `‖f(x, y0 + δ) − (y0 + δ)‖₂` with `δ ~ N(0, scale²)`, averaged over
/// `draws` draws.
pub fn identity_gap(model: &DualInputModel, x: &Tensor, scale: f64, draws: usize, seed: u64) -> Result<f64> {
    let x = x.as_matrix();
    let y0 = model.predict_y0(&x)?;
    let mut r = rng::rng(seed);
    let mut total = 0.0;
    for _ in 0..draws {
        let noise: Vec<f64> = (0..y0.len()).map(|_| r.sample(StandardNormal)).collect();
        let mut a = y0.clone();
        for (v, e) in a.data_mut().iter_mut().zip(noise) {
            *v += scale * e;
        }
        let out = model.infer(&x, &a)?;
        let d = pair_distances(&PredictionPair { y0: out, y1: a });
        total += d.iter().sum::<f64>() / d.len() as f64;
    }
    Ok(total / draws as f64)
}

/// Runs the naive objective for `cfg.steps` steps on a copy of `model`
/// (no reset) and reports how prediction error and the identity gap moved.
pub fn naive_failure_probe(
    model: &DualInputModel,
    x: &Tensor,
    y: &Tensor,
    cfg: &TttConfig,
    seed: u64,
) -> Result<NaiveProbeReport> {
    cfg.validate()?;
    let x = x.as_matrix();
    let y = y.as_matrix();
    let scale = {
        let y0 = model.predict_y0(&x)?;
        let m = y0.mean();
        (y0.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / y0.len() as f64)
            .sqrt()
            .max(1.0)
    };
    let gap_before = identity_gap(model, &x, scale, 4, seed)?;
    let error_before = task_error(model.task(), &model.predict_y0(&x)?, &y);
    let mut live = model.clone();
    let mut opt = cfg.optimizer_spec().build();
    let mut steps = 0;
    for _ in 0..cfg.steps {
        if ttt_step(&mut live, &Second::Live, &x, cfg.loss_norm, &mut opt)?.is_none() {
            break;
        }
        steps += 1;
    }
    let gap_after = identity_gap(&live, &x, scale, 4, seed)?;
    let error_after = task_error(live.task(), &live.predict_y0(&x)?, &y);
    Ok(NaiveProbeReport {
        identity_gap_before: gap_before,
        identity_gap_after: gap_after,
        error_before,
        error_after,
        error_magnification: if error_before > 0.0 {
            error_after / error_before
        } else {
            f64::NAN
        },
        steps,
    })
}
