//! Versioned JSON persistence of trained models. The factorization is never
//! stored; loading re-conditions the GP from the embedded dataset.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{CalibrationSample, FeatureStats, Hyperparameters, SdcmModel};
use crate::hyperopt::TrialRecord;
use crate::windowing::WindowSpec;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Hex digest of the configuration that produced the model.
    pub config_hash: String,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format_version: u32,
    pub window: WindowSpec,
    pub theta: Hyperparameters,
    /// Prior mean in normalized units (recomputed on load and checked).
    pub mu: f64,
    pub feature_stats: FeatureStats,
    pub target_scale: f64,
    pub lifespan_s: Option<f64>,
    pub samples: Vec<CalibrationSample>,
    pub provenance: Provenance,
    #[serde(default)]
    pub log_likelihood: Option<f64>,
    #[serde(default)]
    pub trial_log: Vec<TrialRecord>,
}

impl ModelArtifact {
    pub fn from_model(model: &SdcmModel, window: WindowSpec, provenance: Provenance) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            window,
            theta: *model.theta(),
            mu: model.mu(),
            feature_stats: model.feature_stats().clone(),
            target_scale: model.target_scale(),
            lifespan_s: model.lifespan_s(),
            samples: model.samples().to_vec(),
            provenance,
            log_likelihood: None,
            trial_log: Vec::new(),
        }
    }

    /// Rebuilds the model (including its factorization).
    pub fn to_model(&self) -> Result<SdcmModel> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported artifact format version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.window.window_len() != self.samples.first().map_or(0, |s| s.features.window.len()) {
            return Err(Error::InvalidInput("artifact window spec does not match its samples".into()));
        }
        let model = SdcmModel::with_stats(
            self.samples.clone(),
            self.theta,
            self.feature_stats.clone(),
            self.target_scale,
            self.lifespan_s,
        )?;
        if (model.mu() - self.mu).abs() > 1e-12 * self.mu.abs().max(1.0) {
            return Err(Error::InvalidInput(format!(
                "artifact prior mean {} disagrees with its dataset ({})",
                self.mu,
                model.mu()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
