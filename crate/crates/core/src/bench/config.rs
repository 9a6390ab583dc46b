use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::SynthSpec;
use crate::adapt::TttConfig;
use crate::dualnet::{Activation, NeutralKind, Task};
use crate::error::{Error, Result};
use crate::ood::CorruptionFamily;
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Base,
    ActmadLite,
    It3Offline,
    It3Naive,
    It3Online,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::ActmadLite => "actmad_lite",
            Method::It3Offline => "it3_offline",
            Method::It3Naive => "it3_naive",
            Method::It3Online => "it3_online",
        }
    }

    pub fn is_online(self) -> bool {
        self == Method::It3Online
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Csv {
        path: PathBuf,
        label_columns: Vec<String>,
    },
    Synthetic(SynthSpec),
}

/// Architecture without the data-dependent input/label widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub task: Task,
    #[serde(default)]
    pub neutral: Option<NeutralKind>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128; 4],
            activation: Activation::Elu,
            task: Task::Regression,
            neutral: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionLevels {
    pub family: CorruptionFamily,
    pub severities: Vec<f64>,
}

impl Default for CorruptionLevels {
    fn default() -> Self {
        Self {
            family: CorruptionFamily::FeatureZeroing,
            severities: vec![0.05, 0.10, 0.15, 0.20],
        }
    }
}

fn default_true() -> bool {
    true
}

/// Drifting-stream evaluation. When present every method consumes the
/// stream; otherwise only online methods do, with one pass over the test
/// split per level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub items_per_level: usize,
    #[serde(default = "default_true")]
    pub interpolate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { steps: 20, lr: 1e-2 }
    }
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_batch_size() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Shared adaptation settings; the mode is set per method.
    #[serde(default = "default_ttt")]
    pub ttt: TttConfig,
    /// Settings for `it3_online` if they should differ from `ttt`.
    #[serde(default)]
    pub online_ttt: Option<TttConfig>,
    #[serde(default)]
    pub corruption: CorruptionLevels,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Per-method batch size overrides.
    #[serde(default)]
    pub method_batch_sizes: BTreeMap<Method, usize>,
    #[serde(default)]
    pub stream: Option<StreamConfig>,
    #[serde(default)]
    pub naive_probe: ProbeConfig,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_ttt() -> TttConfig {
    TttConfig::new(crate::adapt::TttMode::Offline)
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        if self.batch_size == 0 || self.method_batch_sizes.values().any(|&b| b == 0) {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.stream.as_ref().is_some_and(|s| s.items_per_level == 0) {
            return Err(Error::Config("stream items_per_level must be positive".into()));
        }
        if self.corruption.severities.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("corruption severities must be strictly increasing".into()));
        }
        self.ttt.validate()?;
        if let Some(o) = &self.online_ttt {
            o.validate()?;
        }
        Ok(())
    }

    pub fn batch_size_for(&self, m: Method) -> usize {
        self.method_batch_sizes.get(&m).copied().unwrap_or(self.batch_size)
    }

    /// Replaces the seeds with a comma-separated list, e.g. from `ITTT_SEED`.
    pub fn override_seeds(&mut self, list: &str) -> Result<()> {
        let seeds = list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("bad seed `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if seeds.is_empty() {
            return Err(Error::Config("empty seed override".into()));
        }
        self.seeds = seeds;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "dataset": {"synthetic": {"n": 100, "input_dim": 6, "function": "friedman"}},
        "methods": ["base", "it3_offline"],
        "seeds": [1, 2]
    }"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.corruption.severities, vec![0.05, 0.10, 0.15, 0.20]);
        assert_eq!(cfg.ttt.steps, 3);
        assert_eq!(cfg.model.hidden, vec![128; 4]);
        let again = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = MINIMAL.replace("\"seeds\"", "\"seedz\": [1], \"seeds\"");
        assert!(matches!(ExperimentConfig::from_json(&bad), Err(Error::Config(_))));
        let bad = MINIMAL.replace("\"n\": 100", "\"n\": 100, \"nn\": 3");
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }

    #[test]
    fn empty_seeds_or_methods_rejected() {
        let bad = MINIMAL.replace("[1, 2]", "[]");
        assert!(ExperimentConfig::from_json(&bad).is_err());
        let bad = MINIMAL.replace("[\"base\", \"it3_offline\"]", "[]");
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }

    #[test]
    fn seed_override() {
        let mut cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        cfg.override_seeds("7, 9").unwrap();
        assert_eq!(cfg.seeds, vec![7, 9]);
        assert!(cfg.override_seeds("x").is_err());
    }
}
