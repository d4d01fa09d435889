//! JSON run configuration shared by the subcommands.

use std::path::{Path, PathBuf};

use aether_core::gnn::{ModelConfig, Variant};
use aether_core::simulate::{SimConfig, Setting};
use aether_core::train::TrainConfig;
use aether_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Overrides applied on top of the dataset-derived evaluation defaults
/// (burn-in = the setting's input length, horizon = every remaining step).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub burn_in: Option<usize>,
    pub horizon: Option<usize>,
    pub max_sims: Option<usize>,
    pub seed: u64,
}

/// One experiment: what to simulate, which model to fit, how to train and
/// evaluate it. Relative paths resolve against the directory holding the
/// config file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Simulator parameters for `gen`.
    pub sim: Option<SimConfig>,
    /// Dataset directory holding `manifest.json`.
    pub data: Option<PathBuf>,
    /// Output directory.
    pub out: Option<PathBuf>,
    pub variant: Option<Variant>,
    /// Hidden width when `model` is absent.
    pub hidden: Option<usize>,
    /// Full model description; overrides `variant` defaults.
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// The model to build for `setting`, with `variant` (from the command
    /// line) taking precedence over the file.
    pub fn resolve_model(&self, setting: Setting, variant: Option<Variant>) -> Result<ModelConfig> {
        if let Some(m) = &self.model {
            if let Some(v) = variant.filter(|v| *v != m.variant) {
                return Err(Error::Config(format!(
                    "--variant {} disagrees with the configured model ({})",
                    v.name(),
                    m.variant.name()
                )));
            }
            if m.d != setting.dim() {
                return Err(Error::Config(format!(
                    "model dimension {} does not match the {} setting",
                    m.d,
                    setting.name()
                )));
            }
            return Ok(m.clone());
        }
        let variant = variant.or(self.variant).unwrap_or(Variant::Aether);
        let mut m = ModelConfig::for_setting(variant, setting);
        if let Some(h) = self.hidden {
            m.hidden = h;
        }
        m.seed = self.train.seed;
        m.validate()?;
        Ok(m)
    }
}
