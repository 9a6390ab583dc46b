//! Self-tests behind `ittt check`: finite-difference verification of every
//! differentiable op and of the training and adaptation losses, plus the
//! adaptation invariants.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::adapt::{
    ema_update, idempotence_loss_on, GradientCut, make_ema_anchor, ttt_episode_offline, AnchorState, TttConfig, TttMode,
};
use crate::diff::{finite_diff_check, finite_diff_check_against, Bindings, Graph, ParamStore, Tensor, Var};
use crate::dualnet::{Activation, DualInputModel, LossNorm, ModelSpec, Task};
use crate::error::Result;
use crate::rng;
use crate::training::{composite_loss_on, TrainConfig};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct CheckItem {
    pub name: String,
    pub passed: bool,
    /// Worst relative error for gradient checks, largest deviation otherwise.
    pub value: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub items: Vec<CheckItem>,
    pub elapsed_ms: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }

    pub fn max_gradient_error(&self) -> f64 {
        self.items
            .iter()
            .filter(|i| i.name.starts_with("grad:"))
            .map(|i| i.value)
            .fold(0.0, f64::max)
    }
}

/// Entries of magnitude in `[0.2, 1]` with random sign, away from the kinks
/// of relu and |·|.
fn away_from_zero(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = r.gen_range(0.2..1.0);
            if r.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

fn store(r: &mut impl Rng, shapes: &[(&str, &[usize])]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        s.insert(*name, away_from_zero(r, shape)).expect("distinct names");
    }
    s
}

type LossFn = Box<dyn Fn(&mut Graph, &Bindings) -> Result<Var>>;

/// Reduces an arbitrary-shape output to a scalar against a fixed target.
fn reduce(g: &mut Graph, out: Var, target: &Tensor) -> Result<Var> {
    let t = g.constant(target.clone());
    g.mse(out, t)
}

fn op_cases(seed: u64) -> Vec<(String, ParamStore, LossFn)> {
    let mut r = rng::rng(seed);
    let mut cases: Vec<(String, ParamStore, LossFn)> = Vec::new();
    let t23 = away_from_zero(&mut r, &[2, 3]);
    let t22 = away_from_zero(&mut r, &[2, 2]);
    let t43 = away_from_zero(&mut r, &[4, 3]);
    let t26 = away_from_zero(&mut r, &[2, 6]);

    let ab = |r: &mut rand_chacha::ChaCha8Rng| store(r, &[("a", &[2, 3]), ("b", &[2, 3])]);
    let a_only = |r: &mut rand_chacha::ChaCha8Rng| store(r, &[("a", &[2, 3])]);

    let t = t22.clone();
    cases.push((
        "matmul".into(),
        store(&mut r, &[("a", &[2, 3]), ("b", &[3, 2])]),
        Box::new(move |g, b| {
            let o = g.matmul(b.get(0), b.get(1))?;
            reduce(g, o, &t)
        }),
    ));
    let t = t23.clone();
    cases.push((
        "add".into(),
        ab(&mut r),
        Box::new(move |g, b| {
            let o = g.add(b.get(0), b.get(1))?;
            reduce(g, o, &t)
        }),
    ));
    let t = t23.clone();
    cases.push((
        "sub".into(),
        ab(&mut r),
        Box::new(move |g, b| {
            let o = g.sub(b.get(0), b.get(1))?;
            reduce(g, o, &t)
        }),
    ));
    let t = t23.clone();
    cases.push((
        "add_scalar".into(),
        store(&mut r, &[("a", &[2, 3]), ("s", &[1])]),
        Box::new(move |g, b| {
            let o = g.add(b.get(0), b.get(1))?;
            reduce(g, o, &t)
        }),
    ));
    let t = t23.clone();
    cases.push((
        "add_row".into(),
        store(&mut r, &[("a", &[2, 3]), ("row", &[1, 3])]),
        Box::new(move |g, b| {
            let o = g.add_row(b.get(0), b.get(1))?;
            reduce(g, o, &t)
        }),
    ));
    let t = t23.clone();
    cases.push((
        "scale".into(),
        a_only(&mut r),
        Box::new(move |g, b| {
            let o = g.scale(b.get(0), -1.7);
            reduce(g, o, &t)
        }),
    ));
    let t = t23.clone();
    cases.push((
        "relu".into(),
        a_only(&mut r),
        Box::new(move |g, b| {
            let o = g.relu(b.get(0));
            reduce(g, o, &t)
        }),
    ));
    let t = t23.clone();
    cases.push((
        "elu".into(),
        a_only(&mut r),
        Box::new(move |g, b| {
            let o = g.elu(b.get(0), 1.0);
            reduce(g, o, &t)
        }),
    ));
    let t = t43.clone();
    cases.push((
        "concat_rows".into(),
        ab(&mut r),
        Box::new(move |g, b| {
            let o = g.concat(b.get(0), b.get(1), 0)?;
            reduce(g, o, &t)
        }),
    ));
    let t = t26.clone();
    cases.push((
        "concat_cols".into(),
        ab(&mut r),
        Box::new(move |g, b| {
            let o = g.concat(b.get(0), b.get(1), 1)?;
            reduce(g, o, &t)
        }),
    ));
    cases.push((
        "sum".into(),
        a_only(&mut r),
        Box::new(|g, b| {
            let s = g.sum(b.get(0));
            let sq = g.mse(s, s)?;
            let c = g.scale(s, 0.3);
            g.add(sq, c)
        }),
    ));
    cases.push((
        "mean".into(),
        a_only(&mut r),
        Box::new(|g, b| {
            let m = g.mean(b.get(0));
            let t = g.constant(Tensor::scalar(0.9));
            g.mse(m, t)
        }),
    ));
    cases.push(("mse".into(), ab(&mut r), Box::new(|g, b| g.mse(b.get(0), b.get(1)))));
    // |a| ≥ 0.2 while the constants stay below 0.1, so a − c never crosses 0
    cases.push((
        "l1".into(),
        a_only(&mut r),
        Box::new(|g, b| {
            let c = g.constant(Tensor::new(vec![2, 3], vec![0.05, -0.05, 0.07, -0.06, 0.04, -0.03])?);
            g.l1(b.get(0), c)
        }),
    ));
    cases.push((
        "softmax_ce".into(),
        ab(&mut r),
        Box::new(|g, b| g.softmax_ce(b.get(0), b.get(1))),
    ));
    let t = t23.clone();
    cases.push((
        "softmax_rows".into(),
        a_only(&mut r),
        Box::new(move |g, b| {
            let o = g.softmax_rows(b.get(0))?;
            reduce(g, o, &t)
        }),
    ));
    let row = away_from_zero(&mut r, &[1, 3]);
    let row2 = row.clone();
    cases.push((
        "mean_rows".into(),
        store(&mut r, &[("a", &[4, 3])]),
        Box::new(move |g, b| {
            let o = g.mean_rows(b.get(0))?;
            reduce(g, o, &row)
        }),
    ));
    cases.push((
        "var_rows".into(),
        store(&mut r, &[("a", &[4, 3])]),
        Box::new(move |g, b| {
            let o = g.var_rows(b.get(0))?;
            reduce(g, o, &row2)
        }),
    ));
    cases
}

fn small_model(activation: Activation, task: Task, seed: u64) -> Result<DualInputModel> {
    let spec = ModelSpec {
        input_dim: 3,
        label_dim: 2,
        hidden: vec![5, 4],
        activation,
        task,
        neutral: None,
    };
    DualInputModel::new(spec, seed)
}

fn batch(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut r = rng::rng(seed);
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect())
        .expect("positive extents")
}

fn grad_item(name: String, params: &ParamStore, f: impl Fn(&mut Graph, &Bindings) -> Result<Var>) -> Result<CheckItem> {
    let rep = finite_diff_check(f, params, FD_STEP, FD_TOL)?;
    Ok(CheckItem {
        name: format!("grad:{name}"),
        passed: rep.passed,
        value: rep.max_rel_error(),
    })
}

/// Finite-difference checks of every op and loss.
pub fn gradient_checks(seed: u64) -> Result<Vec<CheckItem>> {
    let mut items = Vec::new();
    for (name, params, f) in op_cases(seed) {
        items.push(grad_item(name, &params, f)?);
    }
    let x = batch(seed ^ 1, 4, 3);
    let y = batch(seed ^ 2, 4, 2);
    for (act, act_name) in [(Activation::Elu, "elu"), (Activation::Relu, "relu")] {
        let model = small_model(act, Task::Regression, seed)?;
        let m = &model;
        let (xx, yy) = (x.clone(), y.clone());
        items.push(grad_item(format!("net_forward_{act_name}"), model.params(), move |g, b| {
            let xv = g.constant(xx.clone());
            let av = g.constant(yy.clone());
            let out = m.forward(g, b, xv, av)?;
            let t = g.constant(yy.clone());
            g.mse(out, t)
        })?);
    }
    for norm in [LossNorm::L2, LossNorm::L1] {
        let model = small_model(Activation::Elu, Task::Regression, seed)?;
        let cfg = TrainConfig {
            loss_norm: norm,
            ..TrainConfig::default()
        };
        let m = &model;
        items.push(grad_item(format!("composite_loss_{norm:?}"), model.params(), |g, b| {
            composite_loss_on(m, g, b, &x, &y, &cfg)
        })?);
    }
    for task in [Task::Regression, Task::Classification] {
        let model = small_model(Activation::Elu, task, seed)?;
        let anchor = small_model(Activation::Elu, task, seed ^ 7)?;
        let (m, a) = (&model, anchor.params().snapshot());
        // the reduced objective: y0 against the anchor's output frozen at θ
        let y0 = model.predict_y0(&x)?;
        let target = model.aux_from_prediction(&model.infer_with(a.values(), &x, &model.aux_from_prediction(&y0))?);
        let rep = finite_diff_check_against(
            |g, b| {
                let second = a.bind(g);
                Ok(idempotence_loss_on(m, g, b, &second, &x, LossNorm::L2, GradientCut::Target)?.1)
            },
            |g, b| {
                let xv = g.constant(x.clone());
                let n = g.constant(m.neutral().batch(x.rows()));
                let y0 = m.forward(g, b, xv, n)?;
                let t = g.constant(target.clone());
                m.discrepancy(g, y0, t, LossNorm::L2)
            },
            model.params(),
            FD_STEP,
            FD_TOL,
        )?;
        items.push(CheckItem {
            name: format!("grad:offline_loss_{task:?}"),
            passed: rep.passed,
            value: rep.max_rel_error(),
        });
        items.push(grad_item(format!("naive_loss_{task:?}"), model.params(), |g, b| {
            Ok(idempotence_loss_on(m, g, b, b, &x, LossNorm::L2, GradientCut::None)?.1)
        })?);
    }
    Ok(items)
}

fn max_abs_diff<'a>(a: impl Iterator<Item = &'a Tensor>, b: impl Iterator<Item = &'a Tensor>) -> f64 {
    a.zip(b)
        .flat_map(|(p, q)| p.data().iter().zip(q.data()).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}

/// Anchor immutability, zero anchor gradient, reset after offline episodes,
/// and the EMA closed form.
pub fn invariant_checks(seed: u64) -> Result<Vec<CheckItem>> {
    let mut items = Vec::new();
    let mut model = small_model(Activation::Elu, Task::Regression, seed)?;
    let anchor = AnchorState::frozen(&model);
    let anchor_before = anchor.clone();
    let theta = model.params().snapshot();
    let mut cfg = TttConfig::new(TttMode::Offline);
    cfg.lr = 1e-2;
    for i in 0..3 {
        ttt_episode_offline(&mut model, &anchor, &batch(seed ^ (10 + i), 4, 3), &cfg)?;
    }
    items.push(CheckItem {
        name: "anchor_unchanged".into(),
        passed: anchor == anchor_before,
        value: max_abs_diff(anchor.params().values(), anchor_before.params().values()),
    });
    let restored = model.params().snapshot();
    items.push(CheckItem {
        name: "theta_restored".into(),
        passed: restored == theta,
        value: max_abs_diff(restored.values(), theta.values()),
    });

    let x = batch(seed ^ 20, 4, 3);
    let mut g = Graph::new();
    let live = model.params().bind(&mut g);
    let second = anchor.params().bind(&mut g);
    let (_, loss) = idempotence_loss_on(&model, &mut g, &live, &second, &x, LossNorm::L2, GradientCut::Target)?;
    let grads = g.backward(loss)?;
    let worst = second
        .vars()
        .iter()
        .filter_map(|&v| grads.get(v))
        .flat_map(|t| t.data().iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    items.push(CheckItem {
        name: "anchor_gradient_zero".into(),
        passed: worst == 0.0,
        value: worst,
    });

    // constant live parameters m: after n updates a = βⁿa₀ + (1 − βⁿ)m
    let beta = 0.9;
    let a0 = small_model(Activation::Elu, Task::Regression, seed ^ 30)?;
    let target = small_model(Activation::Elu, Task::Regression, seed ^ 31)?;
    let mut ema = make_ema_anchor(&a0, beta)?;
    let n = 25;
    for _ in 0..n {
        ema_update(&mut ema, &target)?;
    }
    let bn = beta.powi(n);
    let closed: Vec<Tensor> = a0
        .params()
        .values()
        .zip(target.params().values())
        .map(|(a, m)| a.zip_map(m, |u, v| bn * u + (1.0 - bn) * v))
        .collect();
    let dev = max_abs_diff(ema.params().values(), closed.iter());
    items.push(CheckItem {
        name: "ema_closed_form".into(),
        passed: dev <= 1e-12,
        value: dev,
    });
    Ok(items)
}

pub fn run_checks(seed: u64) -> Result<CheckReport> {
    let t0 = Instant::now();
    let mut items = gradient_checks(seed)?;
    items.extend(invariant_checks(seed)?);
    Ok(CheckReport {
        items,
        elapsed_ms: t0.elapsed().as_secs_f64() * 1e3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        let rep = run_checks(3).unwrap();
        for i in &rep.items {
            assert!(i.passed, "{} failed with {}", i.name, i.value);
        }
        assert!(rep.max_gradient_error() < FD_TOL);
    }
}
