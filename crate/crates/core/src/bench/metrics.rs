use serde::{Deserialize, Serialize};

use crate::adapt::NaiveProbeReport;

/// Result of one (method, level, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub level: usize,
    pub seed: u64,
    /// Regression MSE or classification error rate.
    pub task_error: f64,
    pub mean_idempotence_error: f64,
    pub episodes: usize,
    pub forward_passes: usize,
    pub backward_passes: usize,
    pub wall_time_ms: f64,
    pub n_samples: usize,
    #[serde(default)]
    pub aborted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<NaiveProbeReport>,
}

impl MetricsRecord {
    pub fn aborted(method: &str, level: usize, seed: u64, error: String) -> Self {
        Self {
            method: method.to_owned(),
            level,
            seed,
            task_error: 0.0,
            mean_idempotence_error: 0.0,
            episodes: 0,
            forward_passes: 0,
            backward_passes: 0,
            wall_time_ms: 0.0,
            n_samples: 0,
            aborted: true,
            error: Some(error),
            probe: None,
        }
    }

    /// Copy with the timing field cleared, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_time_ms: 0.0,
            ..self.clone()
        }
    }
}
