//! Comparison methods: the unadapted model and ActMAD-lite, which aligns
//! per-layer activation means and variances of a test batch with those
//! recorded on the training set.

use serde::{Deserialize, Serialize};

use crate::adapt::{EpisodeReport, TttConfig};
use crate::bench::Dataset;
use crate::diff::{Graph, Tensor, Var};
use crate::dualnet::DualInputModel;
use crate::error::{Error, Result};

/// `y0` predictions of the unadapted model.
pub fn base_predict(model: &DualInputModel, x: &Tensor) -> Result<Tensor> {
    model.predict_y0(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub mean: Tensor,
    /// Population variance.
    pub var: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub layers: Vec<LayerStats>,
    pub sample_count: usize,
}

/// Per-hidden-layer mean and variance of post-activation values over
/// `data`, with the neutral auxiliary input. Welford accumulation.
pub fn collect_stats(model: &DualInputModel, data: &Dataset) -> Result<ActivationStats> {
    let n = data.len();
    if n < 2 {
        return Err(Error::Contract(format!("collect_stats needs ≥ 2 samples, got {n}")));
    }
    let (_, hidden) = model.infer_hidden(&data.features, &model.neutral().batch(n))?;
    let layers = hidden
        .iter()
        .map(|h| {
            let c = h.cols();
            let mut mean = vec![0.0; c];
            let mut m2 = vec![0.0; c];
            for (i, row) in h.data().chunks(c).enumerate() {
                let k = (i + 1) as f64;
                for ((mu, s), &v) in mean.iter_mut().zip(&mut m2).zip(row) {
                    let delta = v - *mu;
                    *mu += delta / k;
                    *s += delta * (v - *mu);
                }
            }
            LayerStats {
                mean: Tensor::vector(mean),
                var: Tensor::vector(m2.into_iter().map(|s| (s / n as f64).max(0.0)).collect()),
            }
        })
        .collect();
    Ok(ActivationStats {
        layers,
        sample_count: n,
    })
}

fn alignment_loss(model: &DualInputModel, g: &mut Graph, stats: &ActivationStats, x: &Tensor) -> Result<(Var, Var)> {
    let binds = model.params().bind(g);
    alignment_loss_on(model, g, &binds, stats, x)
}

/// `Σ_layers mean|μ_batch − μ_train| + mean|v_batch − v_train|`.
pub fn alignment_loss_on(
    model: &DualInputModel,
    g: &mut Graph,
    binds: &crate::diff::Bindings,
    stats: &ActivationStats,
    x: &Tensor,
) -> Result<(Var, Var)> {
    let xv = g.constant(x.clone());
    let aux = g.constant(model.neutral().batch(x.rows()));
    let (out, hidden) = model.forward_hidden(g, binds, xv, aux)?;
    if hidden.len() != stats.layers.len() {
        return Err(Error::Contract("activation stats do not match model depth".into()));
    }
    let mut total: Option<Var> = None;
    for (h, ls) in hidden.into_iter().zip(&stats.layers) {
        let mu = g.mean_rows(h)?;
        let var = g.var_rows(h)?;
        let c = ls.mean.len();
        let mu_t = g.constant(ls.mean.reshape(&[1, c])?);
        let var_t = g.constant(ls.var.reshape(&[1, c])?);
        let a = g.l1(mu, mu_t)?;
        let b = g.l1(var, var_t)?;
        let term = g.add(a, b)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let loss = total.ok_or_else(|| Error::Contract("model has no hidden layers".into()))?;
    Ok((out, loss))
}

/// Alignment loss value for a batch under the model's current parameters.
pub fn alignment_value(model: &DualInputModel, stats: &ActivationStats, x: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (_, l) = alignment_loss(model, &mut g, stats, &x.as_matrix())?;
    Ok(g.value(l).item())
}

/// `cfg.steps` updates on the alignment loss, a final `y0` prediction, and
/// a reset of θ. Needs at least two samples for batch statistics.
pub fn actmad_episode(
    model: &mut DualInputModel,
    stats: &ActivationStats,
    x: &Tensor,
    cfg: &TttConfig,
) -> Result<(Tensor, EpisodeReport)> {
    cfg.validate()?;
    let x = x.as_matrix();
    if x.rows() < 2 {
        return Err(Error::UnsupportedBatch {
            size: x.rows(),
            reason: "activation statistics need at least two samples",
        });
    }
    let saved = model.params().snapshot();
    let mut opt = cfg.optimizer_spec().build();
    let mut loss_before = f64::NAN;
    let mut y0_before = None;
    let mut steps_taken = 0;
    let mut aborted = false;
    let mut forwards = 0;
    let result = (|| -> Result<()> {
        for _ in 0..cfg.steps {
            forwards += 1;
            let mut g = Graph::new();
            let binds = model.params().bind(&mut g);
            let (out, loss) = alignment_loss_on(model, &mut g, &binds, stats, &x)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                aborted = true;
                break;
            }
            if y0_before.is_none() {
                loss_before = lv;
                y0_before = Some(g.value(out).clone());
            }
            let grads = g.backward(loss)?;
            model.params_mut().accumulate(&binds, &grads);
            match opt.step(model.params_mut()) {
                Ok(()) => steps_taken += 1,
                Err(Error::Numeric(_)) => {
                    aborted = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    })();
    let finish = || -> Result<(Tensor, f64)> {
        let pred = model.predict_y0(&x)?;
        let after = alignment_value(model, stats, &x)?;
        Ok((pred, after))
    };
    let tail = result.and_then(|_| finish());
    model.params_mut().restore(&saved)?;
    model.params_mut().zero_grad();
    let (pred, loss_after) = tail?;
    let report = EpisodeReport {
        loss_before,
        loss_after,
        y0_before: y0_before.unwrap_or_else(|| pred.clone()),
        y0_after: pred.clone(),
        steps_taken,
        aborted,
        forward_passes: forwards + 1,
        backward_passes: steps_taken,
        diagnostic_passes: 1,
    };
    Ok((pred, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::TttMode;
    use crate::dualnet::ModelSpec;

    fn setup() -> (DualInputModel, Dataset) {
        let m = DualInputModel::new(ModelSpec::regression(3, 1, vec![6, 5]), 2).unwrap();
        let x: Vec<f64> = (0..30).map(|i| ((i * 7 % 11) as f64 / 5.0) - 1.0).collect();
        let ds = Dataset::new(
            Tensor::new(vec![10, 3], x).unwrap(),
            Tensor::zeros(&[10, 1]),
        )
        .unwrap();
        (m, ds)
    }

    #[test]
    fn stats_need_two_samples() {
        let (m, ds) = setup();
        assert!(collect_stats(&m, &ds.slice(0, 1)).is_err());
    }

    #[test]
    fn duplicated_dataset_has_same_stats() {
        let (m, ds) = setup();
        let idx: Vec<usize> = (0..10).chain(0..10).collect();
        let a = collect_stats(&m, &ds).unwrap();
        let b = collect_stats(&m, &ds.subset(&idx)).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            for (x, y) in la.mean.data().iter().zip(lb.mean.data()) {
                assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in la.var.data().iter().zip(lb.var.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_layer_has_zero_variance() {
        let (mut m, ds) = setup();
        // zero first-layer weights: hidden layer 0 equals elu(bias) everywhere
        m.params_mut().entries_mut()[0]
            .value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let s = collect_stats(&m, &ds).unwrap();
        assert!(s.layers[0].var.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_of_one_is_unsupported() {
        let (mut m, ds) = setup();
        let stats = collect_stats(&m, &ds).unwrap();
        let cfg = TttConfig::new(TttMode::Offline);
        let x = ds.features.select_rows(&[0]);
        assert!(matches!(
            actmad_episode(&mut m, &stats, &x, &cfg),
            Err(Error::UnsupportedBatch { size: 1, .. })
        ));
    }

    #[test]
    fn zero_lr_matches_base_and_leaves_params() {
        let (mut m, ds) = setup();
        let stats = collect_stats(&m, &ds).unwrap();
        let before = m.params().clone();
        let mut cfg = TttConfig::new(TttMode::Offline);
        cfg.lr = 0.0;
        let x = ds.features.select_rows(&[1, 2, 3, 4]);
        let (pred, rep) = actmad_episode(&mut m, &stats, &x, &cfg).unwrap();
        assert_eq!(pred, base_predict(&m, &x).unwrap());
        assert_eq!(m.params(), &before);
        assert_eq!(rep.steps_taken, 3);
    }
}
