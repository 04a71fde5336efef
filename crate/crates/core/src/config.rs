//! Run configuration: one TOML file resolving every knob of a training or
//! evaluation run. Unknown keys are rejected; the resolved config is echoed
//! into the run directory so every run is reproducible from its folder.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::compa::CompaConfig;
use crate::error::{Error, Result};
use crate::med_prior::MedPriorConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// dataset manifest path (jsonl)
    pub manifest: PathBuf,
    /// run directory; relative paths resolve under the run root
    pub run_dir: PathBuf,
    pub backbone: BackboneConfig,
    pub compa: CompaConfig,
    pub med: MedPriorConfig,
    pub train: TrainConfig,
    /// seed for frozen synthetic teachers (shared across variants)
    pub teacher_seed: u64,
    /// optional per-modality teacher backbone checkpoints; modalities
    /// without an entry get a frozen synthetic teacher
    pub teacher_checkpoints: BTreeMap<String, PathBuf>,
}

impl RunConfig {
    pub fn load_toml(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()?;
        if self.manifest.as_os_str().is_empty() {
            return Err(Error::Config("manifest path must be set".into()));
        }
        Ok(())
    }

    /// Model configuration for `n_identities` classes. The modality feature
    /// dimension follows the backbone dimension.
    pub fn model_config(&self, n_identities: usize) -> Result<ModelConfig> {
        let mut compa = self.compa.clone();
        compa.d_m = self.backbone.dim;
        let cfg = ModelConfig {
            backbone: self.backbone.clone(),
            compa,
            med: self.med.clone(),
            n_identities,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Run directory resolved against the run root (`MAMI_RUN_DIR` env var
    /// overrides the default of the current directory).
    pub fn resolved_run_dir(&self) -> PathBuf {
        if self.run_dir.is_absolute() {
            self.run_dir.clone()
        } else {
            run_root().join(&self.run_dir)
        }
    }

    /// Echoes the resolved config into the run directory.
    pub fn echo(&self, run_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(run_dir)?;
        std::fs::write(run_dir.join("config.resolved"), self.to_toml()?)?;
        Ok(())
    }
}

/// Output root for run directories: `MAMI_RUN_DIR` if set, else ".".
pub fn run_root() -> PathBuf {
    std::env::var_os("MAMI_RUN_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}
