//! Synthetic distribution shift: input corruptions, severity ladders and
//! drifting streams.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bench::Dataset;
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorruptionKind {
    /// Each feature independently replaced by 0 with probability `p`.
    FeatureZeroing { p: f64 },
    /// Additive `σ·ε`, `ε ~ N(0, 1)`.
    GaussianNoise { sigma: f64 },
    /// Label-range shift: samples with labels outside `[lo, hi]` are OOD.
    /// Inputs are left untouched; see [`label_range_holdout`].
    LabelRangeHoldout { lo: f64, hi: f64 },
}

/// Corruption families that have a scalar severity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionFamily {
    FeatureZeroing,
    GaussianNoise,
}

impl CorruptionFamily {
    pub fn at(self, severity: f64) -> CorruptionKind {
        match self {
            Self::FeatureZeroing => CorruptionKind::FeatureZeroing { p: severity },
            Self::GaussianNoise => CorruptionKind::GaussianNoise { sigma: severity },
        }
    }
}

impl CorruptionKind {
    pub fn severity(&self) -> f64 {
        match *self {
            Self::FeatureZeroing { p } => p,
            Self::GaussianNoise { sigma } => sigma,
            Self::LabelRangeHoldout { .. } => 0.0,
        }
    }

    fn with_severity(&self, s: f64) -> Self {
        match *self {
            Self::FeatureZeroing { .. } => Self::FeatureZeroing { p: s },
            Self::GaussianNoise { .. } => Self::GaussianNoise { sigma: s },
            other => other,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::FeatureZeroing { p } if !(0.0..=1.0).contains(&p) => {
                Err(Error::Config(format!("zeroing probability {p} outside [0, 1]")))
            }
            Self::GaussianNoise { sigma } if !(sigma >= 0.0) => {
                Err(Error::Config(format!("noise sigma {sigma} must be ≥ 0")))
            }
            Self::LabelRangeHoldout { lo, hi } if !(lo <= hi) => {
                Err(Error::Config(format!("label range [{lo}, {hi}] is empty")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub seed: u64,
}

fn corrupt_row(kind: &CorruptionKind, row: &mut [f64], seed: u64) {
    match *kind {
        CorruptionKind::FeatureZeroing { p } => {
            if p <= 0.0 {
                return;
            }
            let mut r = rng::rng(seed);
            for v in row {
                if r.gen::<f64>() < p {
                    *v = 0.0;
                }
            }
        }
        CorruptionKind::GaussianNoise { sigma } => {
            if sigma == 0.0 {
                return;
            }
            let mut r = rng::rng(seed);
            for v in row {
                let e: f64 = r.sample(StandardNormal);
                *v += sigma * e;
            }
        }
        CorruptionKind::LabelRangeHoldout { .. } => {}
    }
}

/// Corrupted copy of `x` (`[m × d]` or `[d]`). Row `i` draws from its own
/// stream seeded by `(spec.seed, i)`, so a row's corruption does not depend
/// on how the batch was assembled.
pub fn corrupt(spec: &CorruptionSpec, x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = x.cols();
    for (i, row) in out.data_mut().chunks_mut(c).enumerate() {
        corrupt_row(&spec.kind, row, rng::derive_seed(spec.seed, &[i as u64]));
    }
    out
}

/// Copy of `data` with corrupted features.
pub fn corrupt_dataset(spec: &CorruptionSpec, data: &Dataset) -> Dataset {
    Dataset {
        features: corrupt(spec, &data.features),
        ..data.clone()
    }
}

/// One spec per severity, seeds derived from `(base_seed, level)`.
pub fn make_levels(family: CorruptionFamily, severities: &[f64], base_seed: u64) -> Result<Vec<CorruptionSpec>> {
    if severities.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Contract(format!(
            "severities must be strictly increasing: {severities:?}"
        )));
    }
    severities
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let kind = family.at(s);
            kind.validate()?;
            Ok(CorruptionSpec {
                kind,
                seed: rng::derive_seed(base_seed, &[i as u64]),
            })
        })
        .collect()
}

/// Splits `data` into samples whose first label lies in `[lo, hi]` and the
/// rest.
pub fn label_range_holdout(data: &Dataset, lo: f64, hi: f64) -> (Dataset, Dataset) {
    let (inside, outside): (Vec<usize>, Vec<usize>) =
        (0..data.len()).partition(|&i| (lo..=hi).contains(&data.labels.row(i)[0]));
    (data.subset(&inside), data.subset(&outside))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSchedule {
    pub levels: Vec<CorruptionSpec>,
    pub items_per_level: usize,
    #[serde(default)]
    pub interpolate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamItem {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub level: usize,
    pub severity: f64,
}

/// Severity of item `j` of level `li`: the level's own severity, or with
/// interpolation a linear ramp from the previous level's severity (0 before
/// the first level) up to this level's.
pub fn stream_severity(schedule: &StreamSchedule, li: usize, j: usize) -> f64 {
    let s = schedule.levels[li].kind.severity();
    if !schedule.interpolate {
        return s;
    }
    let prev = if li == 0 {
        0.0
    } else {
        schedule.levels[li - 1].kind.severity()
    };
    prev + (s - prev) * j as f64 / schedule.items_per_level as f64
}

/// Emits `items_per_level` samples per level in level order, cycling
/// through `data`'s rows in order.
pub fn stream(schedule: &StreamSchedule, data: &Dataset) -> Result<Vec<StreamItem>> {
    if data.is_empty() {
        return Err(Error::Contract("stream: empty dataset".into()));
    }
    let mut out = Vec::with_capacity(schedule.levels.len() * schedule.items_per_level);
    let mut cursor = 0;
    for (li, spec) in schedule.levels.iter().enumerate() {
        spec.kind.validate()?;
        for j in 0..schedule.items_per_level {
            let i = cursor % data.len();
            cursor += 1;
            let severity = stream_severity(schedule, li, j);
            let kind = spec.kind.with_severity(severity);
            let mut x = data.features.row(i).to_vec();
            corrupt_row(&kind, &mut x, rng::derive_seed(spec.seed, &[j as u64]));
            out.push(StreamItem {
                x,
                y: data.labels.row(i).to_vec(),
                level: li,
                severity,
            });
        }
    }
    Ok(out)
}

/// Stacks stream items into a `(features, labels)` batch.
pub fn stack_items(items: &[StreamItem]) -> Result<(Tensor, Tensor)> {
    let d = items.first().map_or(0, |it| it.x.len());
    let k = items.first().map_or(0, |it| it.y.len());
    let x = items.iter().flat_map(|it| it.x.iter().copied()).collect();
    let y = items.iter().flat_map(|it| it.y.iter().copied()).collect();
    Ok((
        Tensor::new(vec![items.len(), d], x)?,
        Tensor::new(vec![items.len(), k], y)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(n: usize, d: usize) -> Dataset {
        let x: Vec<f64> = (0..n * d).map(|i| 1.0 + i as f64).collect();
        let y: Vec<f64> = (0..n).map(|i| i as f64).collect();
        Dataset::new(Tensor::new(vec![n, d], x).unwrap(), Tensor::new(vec![n, 1], y).unwrap()).unwrap()
    }

    fn fz(p: f64) -> CorruptionSpec {
        CorruptionSpec {
            kind: CorruptionKind::FeatureZeroing { p },
            seed: 11,
        }
    }

    #[test]
    fn zeroing_extremes() {
        let x = data(4, 5).features;
        assert_eq!(corrupt(&fz(0.0), &x), x);
        assert!(corrupt(&fz(1.0), &x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroing_fraction_concentrates() {
        let x = Tensor::ones(&[1000, 100]);
        let out = corrupt(&fz(0.1), &x);
        let zeroed = out.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!((0.094..=0.106).contains(&zeroed), "{zeroed}");
    }

    #[test]
    fn gaussian_noise_is_seeded_and_pure() {
        let x = data(3, 4).features;
        let before = x.clone();
        let spec = CorruptionSpec {
            kind: CorruptionKind::GaussianNoise { sigma: 0.3 },
            seed: 5,
        };
        let a = corrupt(&spec, &x);
        assert_eq!(a, corrupt(&spec, &x));
        assert_ne!(a, x);
        assert_eq!(x, before);
    }

    #[test]
    fn levels() {
        let lv = make_levels(CorruptionFamily::FeatureZeroing, &[0.05, 0.10, 0.15, 0.20], 1).unwrap();
        assert_eq!(lv.len(), 4);
        assert_eq!(lv[2].kind, CorruptionKind::FeatureZeroing { p: 0.15 });
        let seeds: std::collections::HashSet<u64> = lv.iter().map(|s| s.seed).collect();
        assert_eq!(seeds.len(), 4);
        assert!(make_levels(CorruptionFamily::FeatureZeroing, &[], 1).unwrap().is_empty());
        let g = make_levels(CorruptionFamily::GaussianNoise, &[0.1, 0.3], 1).unwrap();
        assert_eq!(g[1].kind, CorruptionKind::GaussianNoise { sigma: 0.3 });
        assert!(make_levels(CorruptionFamily::GaussianNoise, &[0.3, 0.1], 1).is_err());
        assert!(make_levels(CorruptionFamily::GaussianNoise, &[0.1, 0.1], 1).is_err());
        assert!(make_levels(CorruptionFamily::FeatureZeroing, &[0.5, 1.5], 1).is_err());
    }

    #[test]
    fn single_level_stream_is_plain_corruption() {
        let ds = data(10, 3);
        let spec = fz(0.4);
        let sched = StreamSchedule {
            levels: vec![spec],
            items_per_level: 10,
            interpolate: false,
        };
        let items = stream(&sched, &ds).unwrap();
        let plain = corrupt(&spec, &ds.features);
        for (i, it) in items.iter().enumerate() {
            assert_eq!(it.x.as_slice(), plain.row(i));
            assert_eq!(it.y[0], i as f64);
        }
    }

    #[test]
    fn stream_levels_are_ordered() {
        let ds = data(7, 2);
        let sched = StreamSchedule {
            levels: make_levels(CorruptionFamily::FeatureZeroing, &[0.05, 0.1, 0.15, 0.2], 3).unwrap(),
            items_per_level: 25,
            interpolate: false,
        };
        let items = stream(&sched, &ds).unwrap();
        assert_eq!(items.len(), 100);
        assert!(items.windows(2).all(|w| w[0].level <= w[1].level));
    }

    #[test]
    fn interpolated_ramp_midpoint() {
        let sched = StreamSchedule {
            levels: vec![fz(0.2)],
            items_per_level: 100,
            interpolate: true,
        };
        assert!((stream_severity(&sched, 0, 50) - 0.1).abs() < 1e-12);
        assert_eq!(stream_severity(&sched, 0, 0), 0.0);
    }

    #[test]
    fn holdout_partitions_by_label() {
        let ds = data(10, 2);
        let (a, b) = label_range_holdout(&ds, 2.0, 5.0);
        assert_eq!(a.len(), 4);
        assert_eq!(b.len(), 6);
    }
}
