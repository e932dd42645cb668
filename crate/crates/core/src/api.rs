//! Wire types shared by the HTTP service, its client and the CLI.
//! Relative paths are resolved against the service's root directory.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::harness::{CompareRow, Progress, RunConfig, RunOutput, PLOT_WINDOW};
use crate::safety::{FallbackTier, GateThresholds, PredictorKind, RiskVariant, TrainReport};
use crate::sim::{Action, SimConfig};

pub const DEFAULT_PORT: u16 = 8717;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    pub config: RunConfig,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobId {
    pub id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Running,
    Succeeded,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn is_finished(self) -> bool {
        self != JobState::Running
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: u64,
    pub state: JobState,
    pub progress: Option<Progress>,
    pub output: Option<RunOutput>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectRequest {
    #[serde(default)]
    pub sim: SimConfig,
    pub episodes: usize,
    pub per_class: usize,
    pub seed: u64,
    /// Dataset file to write.
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectResponse {
    pub dataset: PathBuf,
    pub episodes: usize,
    pub collision_episodes: usize,
    pub negatives: usize,
    pub positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRiskRequest {
    pub dataset: PathBuf,
    pub variant: RiskVariant,
    pub seed: u64,
    /// Model file to write.
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRiskResponse {
    pub model: PathBuf,
    pub report: TrainReport,
}

fn plot_window() -> usize {
    PLOT_WINDOW
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRequest {
    #[serde(default)]
    pub logs: Vec<PathBuf>,
    /// Every `*.csv` in this directory is added to `logs`.
    #[serde(default)]
    pub log_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    #[serde(default = "plot_window")]
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotResponse {
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRequest {
    #[serde(default)]
    pub logs: Vec<PathBuf>,
    #[serde(default)]
    pub log_dir: Option<PathBuf>,
    /// Final window in environment steps.
    pub window: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareResponse {
    pub rows: Vec<CompareRow>,
    pub table: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRequest {
    pub model: PathBuf,
    pub observation: Vec<f64>,
    pub action: Action,
    #[serde(default)]
    pub thresholds: GateThresholds,
    #[serde(default)]
    pub predictor: PredictorKind,
    #[serde(default)]
    pub sim: SimConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateResponse {
    pub action: Action,
    pub tier: FallbackTier,
    pub risk: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::Variant;

    #[test]
    fn requests_round_trip_and_default() {
        let req = TrainRequest { config: RunConfig::new(Variant::SaradDgh, 1000, 3), out_dir: "runs".into() };
        let back: TrainRequest = serde_json::from_str(&serde_json::to_string(&req).unwrap()).unwrap();
        assert_eq!(back, req);
        let plot: PlotRequest = serde_json::from_str(r#"{"log_dir":"runs","out_dir":"p"}"#).unwrap();
        assert_eq!(plot.window, PLOT_WINDOW);
        assert!(plot.logs.is_empty());
        let gate: GateRequest = serde_json::from_str(r#"{"model":"m.json","observation":[0.0],"action":0}"#).unwrap();
        assert_eq!(gate.thresholds, GateThresholds::default());
        assert_eq!(gate.predictor, PredictorKind::Local);
        assert_eq!(serde_json::to_string(&JobState::Succeeded).unwrap(), r#""succeeded""#);
    }
}
