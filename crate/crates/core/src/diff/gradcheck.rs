//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use super::graph::{Graph, Var};
use super::params::{Bindings, ParamStore};
use crate::error::Result;

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// Denominator floor so that near-zero gradients compare by absolute error.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient of `loss_fn` with central differences of
/// step `h` for every scalar in `params`.
///
/// `loss_fn` builds a scalar loss on a fresh graph from the bound params.
pub fn finite_diff_check<F>(loss_fn: F, params: &ParamStore, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bindings) -> Result<Var>,
{
    finite_diff_check_against(&loss_fn, &loss_fn, params, h, tol)
}

/// Like [`finite_diff_check`], but differentiates `analytic` and
/// differences `numeric`. Used for losses with stop-gradient, whose
/// gradient is that of a reduced objective with the detached parts frozen
/// at the current parameters.
pub fn finite_diff_check_against<A, N>(
    analytic: A,
    numeric: N,
    params: &ParamStore,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    A: Fn(&mut Graph, &Bindings) -> Result<Var>,
    N: Fn(&mut Graph, &Bindings) -> Result<Var>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let l = numeric(&mut g, &b)?;
        Ok(g.value(l).item())
    };

    let mut g = Graph::new();
    let binds = params.bind(&mut g);
    let loss = analytic(&mut g, &binds)?;
    let grads = g.backward(loss)?;

    let mut probe = params.clone();
    let mut checks = Vec::with_capacity(params.len());
    for (pi, entry) in params.entries().iter().enumerate() {
        let analytic = grads
            .get(binds.get(pi))
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; entry.value.len()]);
        let mut worst: f64 = 0.0;
        for (k, &a) in analytic.iter().enumerate() {
            let orig = entry.value.data()[k];
            probe.entries_mut()[pi].value.data_mut()[k] = orig + h;
            let up = eval(&probe)?;
            probe.entries_mut()[pi].value.data_mut()[k] = orig - h;
            let down = eval(&probe)?;
            probe.entries_mut()[pi].value.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(a, numeric);
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
        checks.push(ParamCheck {
            name: entry.name.clone(),
            max_rel_error: worst,
        });
    }
    let passed = checks.iter().all(|c| c.max_rel_error <= tol);
    Ok(GradCheckReport {
        params: checks,
        tol,
        passed,
    })
}
