//! TOML run configuration shared by the CLI subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::WorkloadConfig;
use crate::generator::remote::RemoteConfig;
use crate::pruner::PruneConfig;
use crate::sampler::AdaptivePolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub epsilon: f64,
    pub truncate: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            epsilon: 0.01,
            truncate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub jobs: Option<usize>,
    pub success_threshold: f64,
    pub workload: WorkloadConfig,
    pub adaptive: AdaptivePolicy,
    pub prune: PruneConfig,
    pub dataset: DatasetConfig,
    pub remote: RemoteConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            out_dir: PathBuf::from("out"),
            jobs: None,
            success_threshold: 0.14,
            workload: WorkloadConfig::default(),
            adaptive: AdaptivePolicy::default(),
            prune: PruneConfig::default(),
            dataset: DatasetConfig::default(),
            remote: RemoteConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::sim::Calibration;

    #[test]
    fn partial_config_keeps_defaults() {
        let c = Config::from_toml_str(
            r#"
            seed = 7
            [adaptive]
            tau = 0.92
            n_max = 16
            annealing = false
            [workload]
            n_prompts = 10
            calibration = { mode = "exact" }
            [remote]
            endpoint = "http://localhost:9/v1/completions"
            logprobs = 20
            "#,
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.adaptive.tau, 0.92);
        assert!(!c.adaptive.annealing);
        assert_eq!(c.workload.n_prompts, 10);
        assert_eq!(c.workload.calibration, Calibration::Exact);
        assert_eq!(c.workload.full_length, 454);
        assert_eq!(c.remote.logprobs, 20);
        assert_eq!(c.remote.retries, 3);
        assert_eq!(c.prune.prune_fraction, 0.75);
    }

    #[test]
    fn unknown_syntax_is_a_config_error() {
        assert!(matches!(
            Config::from_toml_str("seed = ["),
            Err(Error::Config(_))
        ));
    }
}
