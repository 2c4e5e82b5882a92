//! Run configuration: one JSON document, with dotted-path overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::curation::CurationConfig;
use crate::error::{Error, Result};
use crate::network::ArchConfig;
use crate::phantom::PhantomConfig;
use crate::robust::PerturbationConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data_dir: PathBuf,
    /// Directory holding one checkpoint per model.
    pub model_path: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "run/data".into(),
            model_path: "run/models".into(),
            report_dir: "run/reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub phantom: PhantomConfig,
    pub curation: CurationConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub perturbation: PerturbationConfig,
    pub paths: Paths,
    /// Seeds the phantom, weight initialisation, batch order and random
    /// perturbations.
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Copies the global seed into every sub-config.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.phantom.master_seed = seed;
        self.train.seed = seed;
        self.perturbation.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.curation.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        self.perturbation.validate()?;
        if self.arch.input_h > self.phantom.image_height || self.arch.input_w > self.phantom.image_width {
            return Err(Error::Config(format!(
                "network input {}x{} exceeds the frame size {}x{}",
                self.arch.input_h, self.arch.input_w, self.phantom.image_height, self.phantom.image_width
            )));
        }
        if self.arch.view_classes != 3 {
            return Err(Error::Config("the diagnosis network has a 3-class view head".into()));
        }
        Ok(())
    }

    /// Applies `key=value` overrides such as `train.epochs=5`. Values are
    /// parsed as JSON, falling back to a plain string.
    pub fn with_overrides(self, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(&self)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut doc;
            for part in key.split('.') {
                slot = slot
                    .get_mut(part)
                    .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
            }
            *slot = value;
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(format!("invalid override: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let c = RunConfig::default()
            .with_overrides(&["train.epochs=3".into(), "paths.data_dir=/tmp/x".into(), "perturbation.strategy=\"Random\"".into()])
            .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.paths.data_dir, PathBuf::from("/tmp/x"));
        assert_eq!(c.perturbation.strategy, crate::robust::Strategy::Random);
        assert!(RunConfig::default().with_overrides(&["train.nope=1".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["train.epochs".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["train.epochs=\"many\"".into()]).is_err());
    }

    #[test]
    fn seed_propagates_and_round_trips() {
        let c = RunConfig::default().with_seed(9);
        assert_eq!((c.phantom.master_seed, c.train.seed, c.perturbation.seed), (9, 9, 9));
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        c.validate().unwrap();
        let bad = c.with_overrides(&["arch.input_h=100".into()]).unwrap();
        assert!(bad.validate().is_err());
    }
}
