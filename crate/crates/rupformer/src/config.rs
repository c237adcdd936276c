//! JSON run configuration. Absent keys take the reference values.

use std::path::{Path, PathBuf};

use rupformer_core::kpi::SplitPlan;
use rupformer_core::model::Hyperparams;
use rupformer_core::synth::CarrierProfile;
use rupformer_core::time::STEPS_PER_DAY;
use rupformer_core::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub hyperparams: Hyperparams,
    /// `train.seed` is ignored; the top-level `seed` drives every run.
    pub train: TrainConfig,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Used by `train` when `--data` is not given.
    pub csv_path: Option<PathBuf>,
    pub carriers: usize,
    pub days: usize,
    /// First instant of generated data.
    pub start: String,
    /// Replaces the default per-carrier profiles when present.
    pub profiles: Option<Vec<CarrierProfile>>,
    /// Offset between consecutive training windows, in steps.
    pub stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            csv_path: None,
            carriers: 21,
            days: 180,
            start: "2024-01-01T00:00:00Z".into(),
            profiles: None,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_days: usize,
    pub val_days: usize,
    pub test_days: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train_days: 150, val_days: 15, test_days: 15 }
    }
}

impl SplitConfig {
    pub fn plan(&self) -> SplitPlan {
        SplitPlan::Steps {
            train: self.train_days * STEPS_PER_DAY,
            val: self.val_days * STEPS_PER_DAY,
            test: self.test_days * STEPS_PER_DAY,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|source| Error::Config { path: path.into(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fsutil::read(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Usage(format!("{}: not UTF-8", path.display())))?;
        Self::from_json(&text, path)
    }

    /// Loads `path` when given, otherwise the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.hyperparams.validate()?;
        self.train.validate()?;
        if self.data.stride == 0 {
            return Err(Error::Usage("data.stride must be positive".into()));
        }
        let s = self.split;
        if s.train_days == 0 || s.val_days == 0 || s.test_days == 0 {
            return Err(Error::Usage("split days must be positive".into()));
        }
        Ok(())
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }
}
