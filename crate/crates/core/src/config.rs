//! TOML run configuration.
//!
//! Every key is optional and falls back to the library defaults; unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::PropagationRule;
use crate::experiment::{ExperimentError, ScenarioConfig};
use crate::synthetic::SyntheticParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl From<ExperimentError> for ConfigError {
    fn from(e: ExperimentError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    Furfine,
    Linear,
    Nonlinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    /// Balance-sheet table; a synthetic system is generated when absent.
    pub input: Option<PathBuf>,
    /// Fixed `i,j,weight` exposure network used instead of reconstruction.
    pub network: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub p: f64,
    pub n_networks: usize,
    pub n_shock_realizations: usize,
    pub p_shock: f64,
    pub x_shock: f64,
    pub rule: RuleKind,
    pub alpha: f64,
    pub base_seed: u64,
    pub tol: f64,
    pub t_max: usize,
    pub alpha_grid: Vec<f64>,
    pub x_shock_grid: Vec<f64>,
    /// Also write reconstructed weights as sparse triplets.
    pub write_weights: bool,
    pub synthetic: SyntheticParams,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        let s = ScenarioConfig::default();
        Self {
            input: None,
            network: None,
            out_dir: PathBuf::from("out"),
            p: s.p,
            n_networks: s.n_networks,
            n_shock_realizations: s.n_shock_realizations,
            p_shock: s.p_shock,
            x_shock: s.x_shock,
            rule: RuleKind::Nonlinear,
            alpha: 1.0,
            base_seed: s.base_seed,
            tol: s.tol,
            t_max: s.t_max,
            alpha_grid: (0..10).map(|k| k as f64 / 2.0).collect(),
            x_shock_grid: (1..=10).map(|k| k as f64 / 500.0).collect(),
            write_weights: false,
            synthetic: SyntheticParams::default(),
        }
    }
}

impl RunConfigFile {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.scenario()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    pub fn rule(&self) -> PropagationRule {
        match self.rule {
            RuleKind::Furfine => PropagationRule::Furfine,
            RuleKind::Linear => PropagationRule::Linear,
            RuleKind::Nonlinear => PropagationRule::Nonlinear { alpha: self.alpha },
        }
    }

    /// Validated scenario parameters.
    pub fn scenario(&self) -> Result<ScenarioConfig, ConfigError> {
        let s = ScenarioConfig {
            p: self.p,
            n_networks: self.n_networks,
            n_shock_realizations: self.n_shock_realizations,
            p_shock: self.p_shock,
            x_shock: self.x_shock,
            rule: self.rule(),
            base_seed: self.base_seed,
            tol: self.tol,
            t_max: self.t_max,
        };
        s.validate()?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_uses_defaults() {
        let cfg = RunConfigFile::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfigFile::default());
        assert_eq!(cfg.scenario().unwrap(), ScenarioConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfigFile::from_toml_str("x_shok = 0.1"),
            Err(ConfigError::Parse(_))
        ));
        assert!(RunConfigFile::from_toml_str("[synthetic]\nsize = 3").is_err());
    }

    #[test]
    fn values_are_validated() {
        assert!(matches!(
            RunConfigFile::from_toml_str("p_shock = 0.0"),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfigFile::from_toml_str(
            "rule = \"linear\"\nbase_seed = 7\nalpha_grid = [0.0, 1.0]\n[synthetic]\nn = 20\n",
        )
        .unwrap();
        assert_eq!(cfg.rule(), PropagationRule::Linear);
        assert_eq!(cfg.synthetic.n, 20);
        let again = RunConfigFile::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(again, cfg);
    }
}
