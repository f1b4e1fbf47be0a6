//! Run configuration, read from TOML.
//!
//! ```toml
//! seed = 7                 # copied into every section below
//!
//! [data]
//! root = "data"            # relative to the config file; MENAN_DATA_DIR when absent
//!
//! [synth]
//! n_speakers = 10
//! n_emotions = 4
//! n_per_cell = 30
//! min_duration_s = 3.0
//! max_duration_s = 8.0
//!
//! [features]
//! target_seconds = 14.0
//! speed_ratios = [0.8, 0.9, 1.1, 1.2]
//!
//! [train]
//! regime = "menan"         # ec_only | multitask | dat | menan
//! lambda = 0.5
//! lr = 0.001
//! batch_size = 16
//! epochs = 300
//! decay_power = 0.9
//!
//! [probe]
//! steps = 400
//! lr = 0.01
//! ```
//!
//! Every key is optional; missing keys take the values shown.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{SynthConfig, SPEED_RATIOS, TARGET_SECONDS};
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::training::TrainConfig;

pub const DATA_DIR_ENV: &str = "MENAN_DATA_DIR";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub target_seconds: f64,
    pub speed_ratios: Vec<f64>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            target_seconds: TARGET_SECONDS,
            speed_ratios: SPEED_RATIOS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub features: FeatureConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            seed: 7,
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            features: FeatureConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
        };
        c.set_seed(7);
        c
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.set_seed(c.seed);
        c.validate()?;
        Ok(c)
    }

    /// Reads a config file; relative data roots resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::from_toml(&text)?;
        if let (Some(root), Some(dir)) = (&c.data.root, path.parent()) {
            if root.is_relative() {
                c.data.root = Some(dir.join(root));
            }
        }
        Ok(c)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.train.seed = seed;
        self.probe.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let f = &self.features;
        if !(f.target_seconds > 0.0 && f.target_seconds.is_finite()) {
            return Err(Error::Config(format!("target_seconds {}", f.target_seconds)));
        }
        if let Some(r) = f.speed_ratios.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
            return Err(Error::Config(format!("speed ratio {r} must be positive")));
        }
        if self.probe.steps == 0 || !(self.probe.lr > 0.0) {
            return Err(Error::Config("probe needs steps ≥1 and lr > 0".into()));
        }
        Ok(())
    }

    /// Data root from the config, else from `MENAN_DATA_DIR`.
    pub fn data_root(&self) -> Result<PathBuf> {
        self.data
            .root
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .ok_or_else(|| Error::Config(format!("no data root: set [data] root or {DATA_DIR_ENV}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::Regime;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.epochs, 300);
        assert_eq!(c.features.speed_ratios, [0.8, 0.9, 1.1, 1.2]);
    }

    #[test]
    fn seed_reaches_every_section() {
        let c = RunConfig::from_toml("seed = 42\n[train]\nregime = \"dat\"\nepochs = 3\n").unwrap();
        assert_eq!((c.synth.seed, c.train.seed, c.probe.seed), (42, 42, 42));
        assert_eq!(c.train.regime, Regime::Dat);
        assert_eq!(c.train.epochs, 3);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for bad in ["[train]\nlambda = 1.5", "[train]\nregime = \"gan\"", "unknown = 1", "[features]\nspeed_ratios = [0.0]"] {
            assert!(matches!(RunConfig::from_toml(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
