use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sdcm::artifact::Provenance;
use sdcm::eval::FoldConfig;
use sdcm::online::UpdateConfig;
use sdcm::pipeline::{DriftScenario, SyntheticScenario};
use sdcm::{Error, Result};

/// Everything a run depends on. Resolved from defaults, then command-line
/// flags, then the config file (highest precedence).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Directory of `t_s,y,u_ref` CSV files. When unset, series are simulated.
    pub data_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub scenario: SyntheticScenario,
    pub snr_levels: Vec<f64>,
    pub folds: FoldConfig,
    /// Fixed update thresholds; when unset they are tuned.
    pub update: Option<UpdateConfig>,
    pub drift: DriftScenario,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            data_dir: None,
            output_dir: PathBuf::from("out"),
            scenario: SyntheticScenario::default(),
            snr_levels: vec![65.0, 55.0, 45.0, 35.0],
            folds: FoldConfig::default(),
            update: None,
            drift: DriftScenario::default(),
        }
    }
}

/// Flag values that override defaults (but not the config file).
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Master random seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Reference-noise SNR in dB (`inf` for none)
    #[arg(long, global = true)]
    pub snr: Option<f64>,
    /// Comma-separated SNR levels for the sweep
    #[arg(long, global = true, value_delimiter = ',')]
    pub snr_levels: Option<Vec<f64>>,
    /// Hyperparameter search restarts
    #[arg(long, global = true)]
    pub n_trials: Option<usize>,
    /// Past samples in the window
    #[arg(long, global = true)]
    pub p: Option<usize>,
    /// Future samples in the window
    #[arg(long, global = true)]
    pub ell: Option<usize>,
    #[arg(long, global = true)]
    pub downsample_factor: Option<usize>,
    /// Training-set cap; 0 disables thinning
    #[arg(long, global = true)]
    pub max_train_samples: Option<usize>,
    #[arg(long, global = true)]
    pub n_profiles: Option<usize>,
    #[arg(long, global = true)]
    pub n_folds: Option<usize>,
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        let sc = &mut cfg.scenario;
        if let Some(v) = self.seed {
            sc.rng_seed = v;
        }
        if let Some(v) = self.snr {
            sc.snr_db = v;
        }
        if let Some(v) = &self.snr_levels {
            cfg.snr_levels = v.clone();
        }
        if let Some(v) = self.n_trials {
            sc.pipeline.search.n_trials = v;
        }
        if let Some(v) = self.p {
            sc.pipeline.window.p = v;
        }
        if let Some(v) = self.ell {
            sc.pipeline.window.ell = v;
        }
        if let Some(v) = self.downsample_factor {
            sc.pipeline.downsample_factor = v;
        }
        if let Some(v) = self.max_train_samples {
            sc.pipeline.max_train_samples = (v > 0).then_some(v);
        }
        if let Some(v) = self.n_profiles {
            sc.population.n_profiles = v;
        }
        if let Some(v) = self.n_folds {
            cfg.folds.n_folds = v;
        }
        if let Some(v) = &self.data_dir {
            cfg.data_dir = Some(v.clone());
        }
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn config_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::InvalidInput(format!("config {}: {e}", path.display()))
}

impl ExperimentConfig {
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let mut cfg = Self::default();
        flags.apply(&mut cfg);
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            let over: toml::Table = toml::from_str(&text).map_err(|e| config_error(path, e))?;
            let mut base = toml::Table::try_from(&cfg).map_err(|e| config_error(path, e))?;
            merge(&mut base, over);
            cfg = base.try_into().map_err(|e| config_error(path, e))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.drift.validate()?;
        if let Some(u) = &self.update {
            u.validate()?;
        }
        if self.folds.n_folds == 0 {
            return Err(Error::InvalidInput("need at least one fold".into()));
        }
        if self.snr_levels.is_empty() || self.snr_levels.iter().any(|s| s.is_nan()) {
            return Err(Error::InvalidInput("SNR levels must be a non-empty list of numbers".into()));
        }
        if let Some(dir) = &self.data_dir {
            if !dir.is_dir() {
                return Err(Error::InvalidInput(format!("data directory {} does not exist", dir.display())));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring where outputs go.
    pub fn hash(&self) -> String {
        let canonical = Self { output_dir: PathBuf::new(), ..self.clone() };
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn provenance(&self) -> Provenance {
        Provenance { config_hash: self.hash(), rng_seed: self.scenario.rng_seed }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_flags_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[scenario]\nsnr_db = 45.0\n[scenario.pipeline.search]\nn_trials = 3\n").unwrap();
        let flags = Overrides { snr: Some(35.0), seed: Some(9), ..Default::default() };
        let cfg = ExperimentConfig::resolve(Some(&path), &flags).unwrap();
        assert_eq!(cfg.scenario.snr_db, 45.0);
        assert_eq!(cfg.scenario.rng_seed, 9);
        assert_eq!(cfg.scenario.pipeline.search.n_trials, 3);
        assert_eq!(cfg.scenario.pipeline.window.p, 6);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[scenario]\nsnr = 45.0\n").unwrap();
        assert!(ExperimentConfig::resolve(Some(&path), &Overrides::default()).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.scenario.snr_db = 35.0;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
