//! Run manifests: everything needed to replay a generation exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unictrl_core::denoiser::DenoiserConfig;
use unictrl_core::diffusion::SamplerConfig;
use unictrl_core::pipeline::{StepRecord, UniCtrlConfig};
use unictrl_core::train::TrainConfig;

use crate::error::{Error, Result};

pub const TOOL: &str = "unictrl";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub path: String,
    pub sha256: String,
}

/// Wall-clock timing; only recorded on request, since it would make
/// otherwise identical manifests differ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub elapsed_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub checkpoint: CheckpointRef,
    pub model: DenoiserConfig,
    pub prompt: String,
    pub seed: u64,
    pub sampler: SamplerConfig,
    /// `None` for baseline sampling.
    pub control: Option<UniCtrlConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    /// One entry per sampling step.
    pub injection_log: Vec<StepRecord>,
    pub artifacts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

impl RunManifest {
    pub fn injected_steps(&self) -> Vec<usize> {
        self.injection_log.iter().filter(|s| s.injected).map(|s| s.index).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: TrainConfig,
    pub checkpoint: String,
    pub final_loss: f32,
    /// Means over the first and last 100 steps (or fewer for short runs).
    pub first_window_loss: f64,
    pub last_window_loss: f64,
    pub losses: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}
