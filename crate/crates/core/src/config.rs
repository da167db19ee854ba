//! Run configuration: one TOML document with a section per command, every
//! key optional and unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::probe::ProbeConfig;
use crate::scenegen::GenConfig;
use crate::trainer::{default_ablation_rows, AblationRow, EvalConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    pub split: String,
    pub gen: GenConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n: 1000, split: "train".into(), gen: GenConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Seeds `seed, seed + 1, ...` are used for every row.
    pub n_seeds: u64,
    pub rows: Vec<AblationRow>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { n_seeds: 3, rows: default_ablation_rows() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; copied into every section that draws randomness.
    pub seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Propagate the global seed.
    pub fn resolve(mut self) -> Self {
        self.train.seed = self.seed;
        self.eval.seed = self.seed;
        self
    }

    pub fn ablation_seeds(&self) -> Vec<u64> {
        (0..self.ablation.n_seeds).map(|k| self.seed + k).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_toml("seed = 4\n[train]\nsteps = 10\n[train.model.encoder]\nn_slots = 7\n").unwrap();
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.train.model.encoder.n_slots, 7);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.resolve().train.seed, 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in ["sead = 1", "[train]\nstep = 3", "[train.lambdas]\nprio = 1.0", "[data.gen]\ncolour = 1"] {
            assert!(matches!(RunConfig::from_toml(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig { seed: 9, ..RunConfig::default() }.resolve();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }
}
