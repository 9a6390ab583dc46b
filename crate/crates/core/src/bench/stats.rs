use serde::{Deserialize, Serialize};

use super::metrics::MetricsRecord;
use crate::error::{Error, Result};

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// 1-based ranks, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, _) = mean_std(a);
    let (mb, _) = mean_std(b);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "spearman: lengths differ ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 3 {
        return Err(Error::Contract("spearman needs at least 3 points".into()));
    }
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub level: usize,
    pub mean_error: f64,
    pub std_error: f64,
    pub mean_idem: f64,
    /// Mean wall time relative to `base` at the same level.
    pub overhead: Option<f64>,
    pub n: usize,
}

/// Aggregates non-aborted records per (method, level), methods in order of
/// first appearance and levels ascending.
pub fn summarize(records: &[MetricsRecord]) -> Vec<SummaryRow> {
    let ok: Vec<&MetricsRecord> = records.iter().filter(|r| !r.aborted).collect();
    let mut methods: Vec<&str> = Vec::new();
    for r in &ok {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut levels: Vec<usize> = ok.iter().map(|r| r.level).collect();
    levels.sort_unstable();
    levels.dedup();
    let mean_time = |method: &str, level: usize| -> Option<f64> {
        let t: Vec<f64> = ok
            .iter()
            .filter(|r| r.method == method && r.level == level)
            .map(|r| r.wall_time_ms)
            .collect();
        (!t.is_empty()).then(|| mean_std(&t).0)
    };
    let mut rows = Vec::new();
    for &m in &methods {
        for &l in &levels {
            let cell: Vec<&&MetricsRecord> = ok.iter().filter(|r| r.method == m && r.level == l).collect();
            if cell.is_empty() {
                continue;
            }
            let errs: Vec<f64> = cell.iter().map(|r| r.task_error).collect();
            let idem: Vec<f64> = cell.iter().map(|r| r.mean_idempotence_error).collect();
            let (mean_error, std_error) = mean_std(&errs);
            let overhead = match (mean_time(m, l), mean_time("base", l)) {
                (Some(t), Some(b)) if b > 0.0 => Some(t / b),
                (Some(_), Some(_)) if m == "base" => Some(1.0),
                _ => None,
            };
            rows.push(SummaryRow {
                method: m.to_owned(),
                level: l,
                mean_error,
                std_error,
                mean_idem: mean_std(&idem).0,
                overhead,
                n: cell.len(),
            });
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: &str, level: usize, err: f64, time: f64) -> MetricsRecord {
        MetricsRecord {
            method: method.into(),
            level,
            seed: 0,
            task_error: err,
            mean_idempotence_error: 0.5,
            episodes: 1,
            forward_passes: 1,
            backward_passes: 0,
            wall_time_ms: time,
            n_samples: 1,
            aborted: false,
            error: None,
            probe: None,
        }
    }

    #[test]
    fn single_record_summary() {
        let s = summarize(&[rec("base", 0, 1.5, 2.0)]);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].mean_error, 1.5);
        assert_eq!(s[0].std_error, 0.0);
        assert_eq!(s[0].overhead, Some(1.0));
    }

    #[test]
    fn population_std() {
        let s = summarize(&[rec("base", 0, 1.0, 1.0), rec("base", 0, 3.0, 1.0)]);
        assert_eq!(s[0].mean_error, 2.0);
        assert_eq!(s[0].std_error, 1.0);
    }

    #[test]
    fn overhead_relative_to_base() {
        let s = summarize(&[rec("base", 1, 1.0, 2.0), rec("it3_offline", 1, 1.0, 9.0)]);
        assert_eq!(s[1].overhead, Some(4.5));
    }

    #[test]
    fn aborted_records_are_skipped() {
        let mut bad = rec("base", 0, 100.0, 1.0);
        bad.aborted = true;
        let s = summarize(&[rec("base", 0, 1.0, 1.0), bad]);
        assert_eq!(s[0].n, 1);
        assert_eq!(s[0].mean_error, 1.0);
    }

    #[test]
    fn spearman_extremes_and_errors() {
        let a = [1.0, 2.0, 5.0, 4.0];
        assert!((spearman(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let b: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((spearman(&a, &b).unwrap() + 1.0).abs() < 1e-15);
        assert!(spearman(&a, &a[..3]).is_err());
        assert!(spearman(&a[..2], &a[..2]).is_err());
    }

    #[test]
    fn ties_get_average_rank() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }
}
