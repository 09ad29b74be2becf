use std::path::Path;

use safediff_core::benchmark::DEFAULT_THRESHOLDS;
use safediff_core::dataset::{DemoConfig, ObservationNoise, SceneRanges, SplitCounts};
use safediff_core::model::{ModelConfig, TrainConfig};
use safediff_core::runtime::{DisturbanceSpec, RolloutConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a run can be configured with. A config file may set any
/// subset of these fields; the rest keep their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub counts: SplitCounts,
    pub ranges: SceneRanges,
    pub demo: DemoConfig,
    /// Noise on the observations recorded in demonstrations.
    pub observation_noise: ObservationNoise,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Closed-loop settings for `eval` and `rollout`. Its disturbance field
    /// is ignored; the injector is switched on with `--disturbance`.
    pub rollout: RolloutConfig,
    pub disturbance: DisturbanceSpec,
    pub thresholds: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            counts: SplitCounts::default(),
            ranges: SceneRanges::default(),
            demo: DemoConfig::default(),
            observation_noise: ObservationNoise::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            rollout: RolloutConfig::default(),
            disturbance: DisturbanceSpec::default(),
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

/// Parses a comma-separated threshold list such as `5,10,15,20`.
pub fn parse_thresholds(s: &str) -> Result<Vec<f64>, String> {
    let values: Vec<f64> = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}")))
        .collect::<Result<_, _>>()?;
    if values.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err("thresholds must be positive and finite".into());
    }
    Ok(values)
}
