//! Engine settings shared by the service, the CLI and the bench harness.

use serde::{Deserialize, Serialize};

use crate::backend::ReferenceParams;
use crate::uncertainty::EnsembleConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Default binarization threshold.
    pub tau: f64,
    /// Logit given to voxels outside the model window.
    pub background_logit: f64,
    /// Encoded windows kept per volumetric session.
    pub cache_entries: usize,
    pub reference: ReferenceParams,
    pub ensemble: EnsembleConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            tau: 0.0,
            background_logit: -10.0,
            cache_entries: 4,
            reference: ReferenceParams::default(),
            ensemble: EnsembleConfig::default(),
        }
    }
}
