//! JSON configuration files. Every field is optional; command-line flags
//! override whatever the file sets.

use std::path::Path;

use serde::{Deserialize, Serialize};
use unictrl_core::diffusion::SamplerConfig;
use unictrl_core::metrics::MetricSettings;
use unictrl_core::pipeline::UniCtrlConfig;
use unictrl_core::train::TrainConfig;

use crate::error::Result;
use crate::manifest::read_json;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateFile {
    pub prompt: Option<String>,
    pub seed: Option<u64>,
    pub sampler: SamplerConfig,
    /// Present means controlled sampling.
    pub control: Option<UniCtrlConfig>,
    pub metrics: MetricSettings,
}

pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    read_json(path)
}

pub fn load_generate_file(path: &Path) -> Result<GenerateFile> {
    read_json(path)
}
