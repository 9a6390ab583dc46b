//! Supervised pre-training with the two-term ZigZag loss
//! `‖f(x, y) − y‖ + ‖f(x, 0) − y‖`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bench::Dataset;
use crate::diff::{Bindings, Graph, OptimizerSpec, Tensor, Var};
use crate::dualnet::{DualInputModel, LossNorm, Task};
use crate::error::{Error, Result};
use crate::rng;

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub loss_norm: LossNorm,
    #[serde(default)]
    pub shuffle_seed: u64,
    #[serde(default)]
    pub early_stop_loss: Option<f64>,
    /// Weight of the `f(x, y)` term.
    #[serde(default = "one")]
    pub label_term_weight: f64,
    /// Weight of the `f(x, 0)` term.
    #[serde(default = "one")]
    pub neutral_term_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            optimizer: OptimizerSpec::adam(1e-3),
            loss_norm: LossNorm::L2,
            shuffle_seed: 0,
            early_stop_loss: None,
            label_term_weight: 1.0,
            neutral_term_weight: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_loss: Option<f64>,
}

/// Builds the composite loss for one mini-batch on `g`. Both forward passes
/// share the parameter leaves in `binds`, so both contribute gradients.
pub fn composite_loss_on(
    model: &DualInputModel,
    g: &mut Graph,
    binds: &Bindings,
    x: &Tensor,
    y: &Tensor,
    cfg: &TrainConfig,
) -> Result<Var> {
    let (x, y) = (x.as_matrix(), y.as_matrix());
    if x.rows() != y.rows() {
        return Err(Error::dim("composite_loss", x.shape(), y.shape()));
    }
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let neutral = g.constant(model.neutral().batch(x.rows()));
    let with_label = model.forward(g, binds, xv, yv)?;
    let with_neutral = model.forward(g, binds, xv, neutral)?;
    let a = model.discrepancy(g, with_label, yv, cfg.loss_norm)?;
    let b = model.discrepancy(g, with_neutral, yv, cfg.loss_norm)?;
    let a = g.scale(a, cfg.label_term_weight);
    let b = g.scale(b, cfg.neutral_term_weight);
    g.add(a, b)
}

/// Value of the composite loss with the model's current parameters.
pub fn composite_loss(model: &DualInputModel, x: &Tensor, y: &Tensor, cfg: &TrainConfig) -> Result<f64> {
    let mut g = Graph::new();
    let binds = model.params().bind(&mut g);
    let l = composite_loss_on(model, &mut g, &binds, x, y, cfg)?;
    Ok(g.value(l).item())
}

/// Mini-batch training on `data`; mutates the model in place.
pub fn fit(model: &mut DualInputModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    let n = data.len();
    if n == 0 {
        return Err(Error::Contract("fit: empty dataset".into()));
    }
    if cfg.batch_size == 0 || cfg.batch_size > n {
        return Err(Error::Config(format!(
            "batch size {} must be in [1, {n}]",
            cfg.batch_size
        )));
    }
    let mut opt = cfg.optimizer.build();
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::rng(rng::derive_seed(cfg.shuffle_seed, &[epoch as u64])));
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let x = data.features.select_rows(idx);
            let y = data.labels.select_rows(idx);
            let mut g = Graph::new();
            let binds = model.params().bind(&mut g);
            let loss = composite_loss_on(model, &mut g, &binds, &x, &y, cfg)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("training loss at epoch {epoch}")));
            }
            total += lv * idx.len() as f64;
            let grads = g.backward(loss)?;
            model.params_mut().accumulate(&binds, &grads);
            opt.step(model.params_mut())?;
        }
        let epoch_loss = total / n as f64;
        report.epoch_losses.push(epoch_loss);
        report.final_loss = Some(epoch_loss);
        log::debug!("epoch {epoch}: loss {epoch_loss:.6}");
        if cfg.early_stop_loss.is_some_and(|t| epoch_loss <= t) {
            break;
        }
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Neutral auxiliary input.
    Y0,
    /// True label as auxiliary input; diagnostic only.
    OracleAux,
}

/// Regression: mean squared error over all label entries. Classification:
/// error rate.
pub fn task_error(task: Task, pred: &Tensor, labels: &Tensor) -> f64 {
    match task {
        Task::Regression => {
            pred.data()
                .iter()
                .zip(labels.data())
                .map(|(p, y)| (p - y) * (p - y))
                .sum::<f64>()
                / pred.len() as f64
        }
        Task::Classification => {
            let (p, y) = (pred.as_matrix(), labels.as_matrix());
            let wrong = (0..p.rows()).filter(|&i| argmax(p.row(i)) != argmax(y.row(i))).count();
            wrong as f64 / p.rows() as f64
        }
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

pub fn eval_task_error(model: &DualInputModel, data: &Dataset, mode: EvalMode) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("eval_task_error: empty dataset".into()));
    }
    let pred = match mode {
        EvalMode::Y0 => model.predict_y0(&data.features)?,
        EvalMode::OracleAux => model.infer(&data.features, &data.labels)?,
    };
    Ok(task_error(model.task(), &pred, &data.labels))
}
