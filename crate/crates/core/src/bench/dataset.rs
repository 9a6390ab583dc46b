use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// Features `[n × d]` and labels `[n × k]` with the per-feature
/// `(mean, std)` that was applied to the features.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Tensor,
    pub standardization: Vec<(f64, f64)>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Tensor) -> Result<Self> {
        if !features.is_matrix() || !labels.is_matrix() || features.rows() != labels.rows() {
            return Err(Error::dim("Dataset::new", features.shape(), labels.shape()));
        }
        if !features.is_finite() || !labels.is_finite() {
            return Err(Error::Numeric("dataset entries".into()));
        }
        let d = features.cols();
        Ok(Self {
            features,
            labels,
            standardization: vec![(0.0, 1.0); d],
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn label_dim(&self) -> usize {
        self.labels.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: self.labels.select_rows(idx),
            standardization: self.standardization.clone(),
        }
    }

    /// Rows `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let idx: Vec<usize> = (start..end).collect();
        self.subset(&idx)
    }
}

/// Train/test partition sharing the train-split standardization.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    /// Indices into the source of features that were dropped as constant.
    pub dropped_features: Vec<usize>,
}

impl Split {
    /// Seeded permutation, then the first `train_fraction` of rows train.
    /// Features are standardized with train statistics (population std);
    /// features constant on the train split are dropped.
    pub fn new(data: &Dataset, seed: u64, train_fraction: f64) -> Result<Self> {
        let n = data.len();
        if n < 2 {
            return Err(Error::Contract(format!("need at least 2 rows to split, got {n}")));
        }
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::Config(format!("train fraction {train_fraction} outside [0, 1]")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::rng(seed));
        let n_train = ((n as f64 * train_fraction).floor() as usize).clamp(1, n - 1);
        let (tr, te) = idx.split_at(n_train);
        let train = data.subset(tr);
        let test = data.subset(te);

        let d = data.input_dim();
        let m = train.len() as f64;
        let mut keep = Vec::new();
        let mut stats = Vec::new();
        let mut dropped = Vec::new();
        for j in 0..d {
            let col = (0..train.len()).map(|i| train.features.row(i)[j]);
            let mean = col.clone().sum::<f64>() / m;
            let var = col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let std = var.sqrt();
            if std > 0.0 {
                keep.push(j);
                stats.push((mean, std));
            } else {
                log::warn!("dropping constant feature {j}");
                dropped.push(j);
            }
        }
        if keep.is_empty() {
            return Err(Error::Contract("every feature is constant".into()));
        }
        let standardize = |ds: &Dataset| -> Result<Dataset> {
            let mut out = Vec::with_capacity(ds.len() * keep.len());
            for i in 0..ds.len() {
                let row = ds.features.row(i);
                for (&j, &(mu, sd)) in keep.iter().zip(&stats) {
                    out.push((row[j] - mu) / sd);
                }
            }
            Ok(Dataset {
                features: Tensor::new(vec![ds.len(), keep.len()], out)?,
                labels: ds.labels.clone(),
                standardization: stats.clone(),
            })
        };
        Ok(Self {
            train: standardize(&train)?,
            test: standardize(&test)?,
            dropped_features: dropped,
        })
    }
}

/// Reads a headered numeric CSV. `label_columns` name the label columns;
/// every other column is a feature.
pub fn read_csv(path: &Path, label_columns: &[String]) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut label_idx = Vec::new();
    for name in label_columns {
        let j = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("label column `{name}` not in header {headers:?}")))?;
        label_idx.push(j);
    }
    if label_idx.is_empty() {
        return Err(Error::Config("no label columns given".into()));
    }
    let feat_idx: Vec<usize> = (0..headers.len()).filter(|j| !label_idx.contains(j)).collect();
    if feat_idx.is_empty() {
        return Err(Error::Config("no feature columns left".into()));
    }
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        // data row numbers are 1-based after the header line
        let row = r + 1;
        let parse = |j: usize| -> Result<f64> {
            let cell = rec.get(j).ok_or_else(|| Error::Parse {
                row,
                col: j,
                msg: "missing cell".into(),
            })?;
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    row,
                    col: j,
                    msg: format!("non-numeric cell `{cell}`"),
                })
        };
        for &j in &feat_idx {
            feats.push(parse(j)?);
        }
        for &j in &label_idx {
            labels.push(parse(j)?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Contract(format!("{}: no data rows", path.display())));
    }
    if rows < 2 {
        return Err(Error::Contract(format!("{}: need at least 2 data rows", path.display())));
    }
    Dataset::new(
        Tensor::new(vec![rows, feat_idx.len()], feats)?,
        Tensor::new(vec![rows, label_idx.len()], labels)?,
    )
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            row: 0,
            col: 0,
            msg: format!("{}: {other:?}", path.display()),
        },
    }
}

/// Reads, splits and standardizes a CSV regression dataset.
pub fn load_csv(path: &Path, label_columns: &[String], seed: u64, train_fraction: f64) -> Result<Split> {
    Split::new(&read_csv(path, label_columns)?, seed, train_fraction)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum SynthFn {
    /// `Σ cᵢ xᵢ`; coefficients default to a seeded draw from `[-1, 1]`.
    Linear {
        #[serde(default)]
        coefficients: Option<Vec<f64>>,
    },
    /// `10 sin(π x₁x₂) + 20 (x₃ − ½)² + 10 x₄ + 5 x₅`; remaining features are
    /// inert.
    Friedman,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub input_dim: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    pub function: SynthFn,
}

pub fn friedman(x: &[f64]) -> f64 {
    10.0 * (PI * x[0] * x[1]).sin() + 20.0 * (x[2] - 0.5).powi(2) + 10.0 * x[3] + 5.0 * x[4]
}

/// Features uniform in `[0, 1]^d`, labels from `spec.function` plus
/// Gaussian noise. The result is not standardized.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    if spec.n < 10 {
        return Err(Error::Config(format!("synthetic n must be ≥ 10, got {}", spec.n)));
    }
    let d = spec.input_dim;
    let mut r = rng::rng(spec.seed);
    let coefs = match &spec.function {
        SynthFn::Linear { coefficients: Some(c) } => {
            if c.len() != d {
                return Err(Error::Config(format!("{} coefficients for {d} features", c.len())));
            }
            c.clone()
        }
        SynthFn::Linear { coefficients: None } => (0..d).map(|_| r.gen_range(-1.0..1.0)).collect(),
        SynthFn::Friedman => {
            if d < 5 {
                return Err(Error::Config("friedman needs input_dim ≥ 5".into()));
            }
            Vec::new()
        }
    };
    let mut feats = Vec::with_capacity(spec.n * d);
    let mut labels = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let x: Vec<f64> = (0..d).map(|_| r.gen::<f64>()).collect();
        let clean = match spec.function {
            SynthFn::Friedman => friedman(&x),
            SynthFn::Linear { .. } => x.iter().zip(&coefs).map(|(a, c)| a * c).sum(),
        };
        let noise: f64 = r.sample(StandardNormal);
        labels.push(clean + spec.noise_sigma * noise);
        feats.extend(x);
    }
    Dataset::new(
        Tensor::new(vec![spec.n, d], feats)?,
        Tensor::new(vec![spec.n, 1], labels)?,
    )
}
