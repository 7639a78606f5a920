//! Experiment configuration file (TOML).
//!
//! ```toml
//! method = "mtlcf"            # base | ft | rt | mtlcf
//! seeds = [1, 2, 3]
//! data_dir = "data"
//! output_dir = "runs"
//! base_checkpoint = "runs/base_seed1/model.ckpt"   # optional
//!
//! [model]      # ModelConfig
//! [original]   # DomainSpec of domain 0
//! [target]     # DomainSpec of domain 1
//! [hyper]      # alpha, beta, temperature, batch_size, reduction
//! [schedule]   # learning_rate, clip, max_halvings, max_epochs, ...
//! ```
//!
//! Every section is optional and falls back to the defaults below; unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DomainSpec, LFR_LEFT_CONTEXT};
use crate::error::{Error, Result};
use crate::losses::HyperParams;
use crate::model::ModelConfig;
use crate::train::{Method, Schedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub base_checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub original: DomainSpec,
    pub target: DomainSpec,
    pub hyper: HyperParams,
    pub schedule: Schedule,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Mtlcf,
            seeds: vec![1],
            data_dir: "data".into(),
            output_dir: "runs".into(),
            base_checkpoint: None,
            model: ModelConfig::default(),
            original: DomainSpec::original(),
            target: DomainSpec::target(),
            hyper: HyperParams::default(),
            schedule: Schedule::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        self.model.validate().map_err(|e| e.in_section("model"))?;
        self.original.validate().map_err(|e| e.in_section("original"))?;
        self.target.validate().map_err(|e| e.in_section("target"))?;
        self.hyper.validate().map_err(|e| e.in_section("hyper"))?;
        self.schedule.validate().map_err(|e| e.in_section("schedule"))?;
        if self.original.domain_id != 0 {
            return Err(Error::config("original.domain_id", "must be 0"));
        }
        if self.target.domain_id != 1 {
            return Err(Error::config("target.domain_id", "must be 1"));
        }
        for (field, a, b) in [
            ("vocab_size", self.original.vocab_size, self.target.vocab_size),
            ("raw_feature_dim", self.original.raw_feature_dim, self.target.raw_feature_dim),
        ] {
            if a != b {
                return Err(Error::config(format!("target.{field}"), format!("{b} differs from original ({a})")));
            }
        }
        if self.original.prototype_seed != self.target.prototype_seed {
            return Err(Error::config("target.prototype_seed", "both domains must share prototypes"));
        }
        let stacked = self.original.raw_feature_dim * (LFR_LEFT_CONTEXT + 1);
        if self.model.input_dim != stacked {
            return Err(Error::config(
                "model.input_dim",
                format!("{} does not match the stacked feature width {stacked}", self.model.input_dim),
            ));
        }
        if self.model.vocab_size != self.original.vocab_size {
            return Err(Error::config(
                "model.vocab_size",
                format!("{} does not match the domains' vocab_size {}", self.model.vocab_size, self.original.vocab_size),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("method = \"ft\"\n[hyper]\nalpha = 0.25\nbeta = 0.5\ntemperature = 1.0\nbatch_size = 4\n").unwrap();
        assert_eq!(cfg.method, Method::Ft);
        assert_eq!(cfg.hyper.alpha, 0.25);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn errors_name_the_field() {
        let cases = [
            ("seeds = []", "seeds"),
            ("[hyper]\nalpha = 1.5\nbeta = 0.5\ntemperature = 1.0\nbatch_size = 4", "hyper.alpha"),
            ("[schedule]\nclip = -1.0", "schedule.clip"),
            ("[model]\ninput_dim = 10\nlstm_layers = 2\nlstm_cells = 32\nrelu_units = 64\nvocab_size = 12\ninit_low = -0.05\ninit_high = 0.05\nseed = 1", "model.input_dim"),
            ("[schedule]\nlearning_rat = 0.1", "learning_rat"),
            ("method = \"sgd\"", "method"),
        ];
        for (text, field) in cases {
            let err = ExperimentConfig::from_toml(text).unwrap_err().to_string();
            assert!(err.contains(field), "{text:?} -> {err}");
        }
    }
}
