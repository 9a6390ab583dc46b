//! Benchmark harness against independent oracles: the friedman formula,
//! a brute-force rank correlation, and end-to-end runner examples.

use std::f64::consts::PI;

use ittt_core::bench::*;
use ittt_core::training::{eval_task_error, EvalMode};
use proptest::prelude::*;

fn friedman_by_hand(x: &[f64]) -> f64 {
    let a = (PI * x[0] * x[1]).sin();
    let b = x[2] - 0.5;
    10.0 * a + 20.0 * b * b + 10.0 * x[3] + 5.0 * x[4]
}

#[test]
fn friedman_labels_match_formula() {
    let spec = SynthSpec { n: 300, input_dim: 7, noise_sigma: 0.0, seed: 3, function: SynthFn::Friedman };
    let d = synth_dataset(&spec).unwrap();
    for i in 0..d.len() {
        let x = d.features.row(i);
        assert!(x.iter().all(|v| (0.0..1.0).contains(v)));
        assert!((d.labels.row(i)[0] - friedman_by_hand(x)).abs() < 1e-12);
    }
}

/// Rank of each value = number of smaller values + half the ties + 1/2.
fn brute_ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&v| {
            let less = xs.iter().filter(|&&u| u < v).count() as f64;
            let eq = xs.iter().filter(|&&u| u == v).count() as f64;
            less + (eq + 1.0) / 2.0
        })
        .collect()
}

fn brute_spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (brute_ranks(a), brute_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

proptest! {
    #[test]
    fn spearman_matches_brute_force(
        pairs in prop::collection::vec((0i32..8, -50.0f64..50.0), 3..40),
    ) {
        // small integer range on one side forces ties
        let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(a.iter().any(|&v| v != a[0]) && b.iter().any(|&v| v != b[0]));
        let got = spearman(&a, &b).unwrap();
        prop_assert!((got - brute_spearman(&a, &b)).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&got));
    }

    #[test]
    fn batch_ranges_cover_in_order(n in 1usize..200, size in 1usize..20) {
        let r = batch_ranges(n, size);
        prop_assert_eq!(r[0].0, 0);
        prop_assert_eq!(r.last().unwrap().1, n);
        for w in r.windows(2) {
            prop_assert_eq!(w[0].1, w[1].0);
        }
        prop_assert!(r.iter().all(|&(s, e)| e > s && e - s <= size + 1));
    }
}

fn small_config(methods: &str, severities: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(
        r#"{{
            "dataset": {{"synthetic": {{"n": 120, "input_dim": 6, "function": "friedman"}}}},
            "model": {{"hidden": [16], "activation": "elu", "task": "regression"}},
            "train": {{"epochs": 5, "batch_size": 32, "optimizer": {{"kind": "adam", "lr": 0.01}}}},
            "ttt": {{"steps": 2, "lr": 0.0001}},
            "corruption": {{"family": "feature_zeroing", "severities": {severities}}},
            "methods": {methods},
            "seeds": [0, 1],
            "batch_size": 5
        }}"#
    ))
    .unwrap()
}

#[test]
fn base_at_zero_severity_is_clean_evaluation() {
    let cfg = small_config(r#"["base"]"#, "[0.0]");
    let ctx = prepare_seed(&cfg, 0, None).unwrap();
    let records = run_seed(&cfg, &ctx);
    let clean = eval_task_error(&ctx.model, &ctx.split.test, EvalMode::Y0).unwrap();
    assert!((records[0].task_error - clean).abs() < 1e-12);
}

#[test]
fn grid_has_one_record_per_cell_with_pass_counts() {
    let methods = r#"["base", "actmad_lite", "it3_offline", "it3_naive", "it3_online"]"#;
    let cfg = small_config(methods, "[0.05, 0.1, 0.15, 0.2]");
    let records = run_experiment(&cfg).unwrap();
    assert_eq!(records.len(), 5 * 4 * 2);
    assert!(records.iter().all(|r| !r.aborted && r.n_samples == 24));
    for r in &records {
        // 24 test rows in batches of 5
        assert_eq!(r.episodes, 5, "{}", r.method);
        match r.method.as_str() {
            "base" => assert_eq!((r.forward_passes, r.backward_passes), (5, 0)),
            "it3_offline" | "it3_online" | "it3_naive" => {
                assert_eq!((r.forward_passes, r.backward_passes), (5 * 5, 5 * 2))
            }
            _ => {}
        }
        assert_eq!(r.probe.is_some(), r.method == "it3_naive");
    }
    let summary = summarize(&records);
    assert_eq!(summary.len(), 20);
    assert!(summary.iter().filter(|s| s.method == "base").all(|s| s.overhead == Some(1.0)));
}

#[test]
fn report_round_trips_a_run() {
    let cfg = small_config(r#"["base", "it3_offline"]"#, "[0.1]");
    let records = run_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = emit_report(&summarize(&records), &records, dir.path()).unwrap();
    assert_eq!(read_jsonl(&paths.records).unwrap(), records);
    let csv = std::fs::read_to_string(&paths.summary).unwrap();
    assert_eq!(csv.lines().next().unwrap(), SUMMARY_HEADER);
}

#[test]
fn saved_weights_reproduce_the_fitted_run() {
    let cfg = small_config(r#"["base", "it3_offline"]"#, "[0.1]");
    let cfg = ExperimentConfig { seeds: vec![4], ..cfg };
    let ctx = prepare_seed(&cfg, 4, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.bin");
    ctx.model.save_weights(&w).unwrap();
    let fitted = run_experiment(&cfg).unwrap();
    let loaded = run_experiment_with(&cfg, Some(&w)).unwrap();
    let strip = |v: &[MetricsRecord]| v.iter().map(MetricsRecord::without_timing).collect::<Vec<_>>();
    assert_eq!(strip(&fitted), strip(&loaded));
}

#[test]
fn mismatched_weights_abort_the_seed() {
    let cfg = small_config(r#"["base"]"#, "[0.1]");
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.bin");
    std::fs::write(&w, b"ITTT1 garbage").unwrap();
    let out = run_experiment_with(&cfg, Some(&w)).unwrap();
    assert!(out.iter().all(|r| r.aborted && r.error.is_some()));
}
