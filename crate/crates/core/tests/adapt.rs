//! Contract tests for test-time adaptation: reset, anchoring, EMA and the
//! gradient paths of the three losses.

use ittt_core::adapt::*;
use ittt_core::diff::{Graph, Tensor};
use ittt_core::dualnet::{DualInputModel, LossNorm, ModelSpec};
use proptest::prelude::*;
use rand::Rng;

fn model(seed: u64) -> DualInputModel {
    DualInputModel::new(ModelSpec::regression(3, 1, vec![8, 8]), seed).unwrap()
}

fn batch(seed: u64, rows: usize) -> Tensor {
    let mut r = ittt_core::rng::rng(seed);
    Tensor::new(vec![rows, 3], (0..rows * 3).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn offline(lr: f64, steps: usize) -> TttConfig {
    TttConfig { lr, steps, ..TttConfig::new(TttMode::Offline) }
}

fn fill(m: &mut DualInputModel, v: f64) {
    for e in m.params_mut().entries_mut() {
        e.value.data_mut().fill(v);
    }
}

/// Gradient norm of the test-time loss with respect to the live and the
/// second-application parameters, the latter bound as separate leaves.
fn grad_norms(m: &DualInputModel, second: &DualInputModel, x: &Tensor, cut: GradientCut) -> (f64, f64) {
    let mut g = Graph::new();
    let live = m.params().bind(&mut g);
    let other = second.params().bind(&mut g);
    let (_, loss) = idempotence_loss_on(m, &mut g, &live, &other, x, LossNorm::L2, cut).unwrap();
    let grads = g.backward(loss).unwrap();
    let norm = |vars: &[ittt_core::diff::Var]| {
        vars.iter()
            .filter_map(|&v| grads.get(v))
            .map(|t| t.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    };
    (norm(live.vars()), norm(other.vars()))
}

#[test]
fn anchor_receives_no_gradient() {
    let m = model(1);
    let x = batch(2, 6);
    for cut in [GradientCut::Target, GradientCut::AnchorWeights] {
        let (live, anchor) = grad_norms(&m, &m.clone(), &x, cut);
        assert!(live > 0.0, "{cut:?}");
        assert_eq!(anchor, 0.0, "{cut:?}");
    }
    // negative control: without a cut the second application gets gradient
    let (_, anchor) = grad_norms(&m, &m.clone(), &x, GradientCut::None);
    assert!(anchor > 0.0);
}

#[test]
fn naive_gradient_differs_from_anchored() {
    let m = model(3);
    let x = batch(4, 6);
    let mut grads = Vec::new();
    for cut in [GradientCut::None, GradientCut::Target] {
        let mut g = Graph::new();
        let live = m.params().bind(&mut g);
        let (_, loss) = idempotence_loss_on(&m, &mut g, &live, &live, &x, LossNorm::L2, cut).unwrap();
        let gr = g.backward(loss).unwrap();
        grads.push(gr.get(live.get(0)).unwrap().clone());
    }
    let diff: f64 = grads[0].data().iter().zip(grads[1].data()).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 1e-8);
}

#[test]
fn ema_arithmetic() {
    let mut anchor_src = model(0);
    fill(&mut anchor_src, 1.0);
    let mut live = model(0);
    fill(&mut live, 2.0);
    for (decay, expect) in [(0.9, 1.1), (1.0, 1.0), (0.0, 2.0)] {
        let mut a = make_ema_anchor(&anchor_src, decay).unwrap();
        ema_update(&mut a, &live).unwrap();
        for t in a.params().values() {
            assert!(t.data().iter().all(|&v| (v - expect).abs() < 1e-15), "decay {decay}");
        }
    }
    assert!(make_ema_anchor(&live, 1.5).is_err());
    assert!(ema_update(&mut AnchorState::frozen(&live), &live).is_err());
}

#[test]
fn idempotence_error_by_hand() {
    let m = model(5);
    let x = batch(6, 5);
    let y0 = m.infer(&x, &Tensor::zeros(&[5, 1])).unwrap();
    let y1 = m.infer(&x, &y0).unwrap();
    let d = idempotence_errors(&m, None, &x).unwrap();
    for ((di, a), b) in d.iter().zip(y1.data()).zip(y0.data()) {
        assert!((di - (a - b).abs()).abs() < 1e-12);
    }
}

#[test]
fn aux_blind_model_is_idempotent_and_not_adapted() {
    let mut m = model(7);
    // rows 3.. of the first weight matrix read the aux signal
    let w = &mut m.params_mut().entries_mut()[0].value;
    let cols = w.cols();
    w.data_mut()[3 * cols..].fill(0.0);
    let x = batch(8, 6);
    assert!(idempotence_errors(&m, None, &x).unwrap().iter().all(|&d| d == 0.0));
    let before = m.predict_y0(&x).unwrap();
    let anchor = AnchorState::frozen(&m);
    let (pair, rep) = ttt_episode_offline(&mut m, &anchor, &x, &offline(1e-2, 3)).unwrap();
    assert_eq!(rep.loss_before, 0.0);
    assert_eq!(pair.y0, before);
}

#[test]
fn zero_lr_matches_base() {
    let mut m = model(9);
    let x = batch(10, 7);
    let base = anchored_pair(&m, None, &x).unwrap();
    let anchor = AnchorState::frozen(&m);
    let (pair, rep) = ttt_episode_offline(&mut m, &anchor, &x, &offline(0.0, 3)).unwrap();
    assert_eq!(pair, base);
    assert_eq!((rep.forward_passes, rep.backward_passes), (7, 3));
}

#[test]
fn online_keeps_updates_and_tracks_anchor() {
    let mut m = model(11);
    let start = m.params().snapshot();
    let tc = TttConfig { lr: 1e-2, ema_decay: 0.5, ..TttConfig::new(TttMode::Online) };
    let mut st = OnlineState::new(&m, &tc).unwrap();
    online_step(&mut m, &mut st, &batch(12, 6), &tc).unwrap();
    assert_ne!(m.params().snapshot(), start);
    assert_ne!(st.anchor.params(), &start);
    assert_ne!(st.anchor.params(), &m.params().snapshot());
}

#[test]
fn online_with_unit_decay_matches_first_offline_episode() {
    let m0 = model(13);
    let x = batch(14, 6);
    let mut a = m0.clone();
    let (off, _) = ttt_episode_offline(&mut a, &AnchorState::frozen(&m0), &x, &offline(1e-2, 3)).unwrap();
    let mut b = m0.clone();
    let tc = TttConfig { lr: 1e-2, ema_decay: 1.0, ..TttConfig::new(TttMode::Online) };
    let mut st = OnlineState::new(&b, &tc).unwrap();
    let (on, _) = online_step(&mut b, &mut st, &x, &tc).unwrap();
    assert_eq!(on, off);
    assert_eq!(st.anchor.params(), &m0.params().snapshot());
}

#[test]
fn loss_tends_to_decrease_at_small_lr() {
    let mut m = model(15);
    let anchor = AnchorState::frozen(&m);
    let mut drops = 0;
    for s in 0..20 {
        let (_, rep) = ttt_episode_offline(&mut m, &anchor, &batch(100 + s, 8), &offline(1e-4, 3)).unwrap();
        if rep.loss_after <= rep.loss_before {
            drops += 1;
        }
    }
    assert!(drops >= 18, "{drops}/20");
}

#[test]
fn modes_are_enforced() {
    let mut m = model(16);
    let x = batch(17, 4);
    let anchor = AnchorState::frozen(&m);
    assert!(ttt_episode_offline(&mut m, &anchor, &x, &TttConfig::new(TttMode::Online)).is_err());
    let ema = make_ema_anchor(&m, 0.9).unwrap();
    assert!(ttt_episode_offline(&mut m, &ema, &x, &offline(1e-3, 1)).is_err());
    let bad = TttConfig { gradient_cut: GradientCut::None, ..offline(1e-3, 1) };
    assert!(bad.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn offline_episode_restores_theta_and_spares_anchor(
        seed in 0u64..1000, steps in 1usize..5, lr in 1e-4f64..1e-1, rows in 2usize..10,
    ) {
        let mut m = model(seed);
        let before = m.params().snapshot();
        let anchor = AnchorState::frozen(&m);
        let anchor_copy = anchor.clone();
        let (_, rep) = ttt_episode_offline(&mut m, &anchor, &batch(seed + 1, rows), &offline(lr, steps)).unwrap();
        prop_assert_eq!(m.params().snapshot(), before);
        prop_assert_eq!(anchor, anchor_copy);
        prop_assert_eq!(rep.forward_passes, 2 * steps + 1);
        prop_assert_eq!(rep.backward_passes, steps);
    }

    #[test]
    fn naive_episode_restores_theta(seed in 0u64..1000, steps in 1usize..4) {
        let mut m = model(seed);
        let before = m.params().snapshot();
        let tc = TttConfig { steps, lr: 1e-2, ..TttConfig::new(TttMode::Naive) };
        ttt_episode_naive(&mut m, &batch(seed + 2, 5), &tc).unwrap();
        prop_assert_eq!(m.params().snapshot(), before);
    }

    #[test]
    fn ema_closed_form(beta in 0.0f64..1.0, a0 in -3.0f64..3.0, target in -3.0f64..3.0, n in 0usize..40) {
        let mut src = model(0);
        fill(&mut src, a0);
        let mut live = model(0);
        fill(&mut live, target);
        let mut a = make_ema_anchor(&src, beta).unwrap();
        for _ in 0..n {
            ema_update(&mut a, &live).unwrap();
        }
        let bn = beta.powi(n as i32);
        let expect = bn * a0 + (1.0 - bn) * target;
        for t in a.params().values() {
            for &v in t.data() {
                prop_assert!((v - expect).abs() < 1e-12, "{} vs {}", v, expect);
            }
        }
    }

    #[test]
    fn idempotence_errors_are_nonnegative(seed in 0u64..500, rows in 1usize..12) {
        let m = model(seed);
        let d = idempotence_errors(&m, None, &batch(seed, rows)).unwrap();
        prop_assert_eq!(d.len(), rows);
        prop_assert!(d.iter().all(|&v| v >= 0.0 && v.is_finite()));
    }
}
