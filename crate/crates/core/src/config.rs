//! Experiment configuration files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PretrainConfig};
use crate::taskgen::{self, SuiteName, TaskSpec};
use crate::trainer::{Mode, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;
pub const OUT_ENV: &str = "CLFORGE_OUT";

/// A committed suite or a JSON file holding a list of task specs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SuiteRef {
    Named(SuiteName),
    Custom(PathBuf),
}

impl TryFrom<String> for SuiteRef {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        if s.trim().is_empty() {
            return Err(Error::Config("suite: must not be empty".into()));
        }
        Ok(match s.parse::<SuiteName>() {
            Ok(name) => SuiteRef::Named(name),
            Err(_) => SuiteRef::Custom(PathBuf::from(s)),
        })
    }
}

impl From<SuiteRef> for String {
    fn from(s: SuiteRef) -> String {
        s.to_string()
    }
}

impl fmt::Display for SuiteRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SuiteRef::Named(SuiteName::Homogeneous) => f.write_str("homogeneous"),
            SuiteRef::Named(SuiteName::Heterogeneous) => f.write_str("heterogeneous"),
            SuiteRef::Named(SuiteName::Mixed) => f.write_str("mixed"),
            SuiteRef::Custom(p) => write!(f, "{}", p.display()),
        }
    }
}

impl SuiteRef {
    pub fn specs(&self) -> Result<Vec<TaskSpec>> {
        match self {
            SuiteRef::Named(name) => Ok(taskgen::default_suite(*name)),
            SuiteRef::Custom(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("suite: cannot read {}: {e}", path.display())))?;
                let specs: Vec<TaskSpec> = serde_json::from_str(&text).map_err(|e| Error::Config(format!("suite: {}: {e}", path.display())))?;
                for s in &specs {
                    s.validate().map_err(|e| Error::Config(format!("suite: task `{}`: {e}", s.name)))?;
                }
                Ok(specs)
            }
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![43, 44, 45]
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub suite: SuiteRef,
    pub mode: Mode,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
}

impl ExperimentConfig {
    pub fn new(suite: SuiteRef, mode: Mode) -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            suite,
            mode,
            train: TrainConfig::default(),
            seeds: default_seeds(),
            out_dir: default_out(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }

    /// Parses and validates JSON. Errors name the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("version: expected {CONFIG_VERSION}, found {}", self.version)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seeds: duplicate seed".into()));
        }
        if self.model.d_vision == 0 || self.model.d_text == 0 || self.model.vision_blocks == 0 {
            return Err(Error::Config("model: dimensions must be positive".into()));
        }
        if self.pretrain.batch_size == 0 || self.pretrain.val_size == 0 || !(self.pretrain.lr > 0.0) {
            return Err(Error::Config("pretrain: batch_size, val_size and lr must be positive".into()));
        }
        self.train.validate()
    }

    /// Output directory, with the environment override applied.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.out_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"version": 1, "suite": "mixed", "mode": "full"}"#).unwrap();
        assert_eq!(cfg.seeds, vec![43, 44, 45]);
        assert_eq!(cfg.suite, SuiteRef::Named(SuiteName::Mixed));
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn missing_field_is_named() {
        let err = ExperimentConfig::from_json(r#"{"version": 1, "mode": "full"}"#).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("suite")), "{err}");
    }

    #[test]
    fn invalid_ratio_is_named() {
        let err = ExperimentConfig::from_json(r#"{"version": 1, "suite": "mixed", "mode": "full", "train": {"r_replay": 1.5}}"#).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("r_replay")), "{err}");
        let err = ExperimentConfig::from_json(r#"{"version": 1, "suite": "mixed", "mode": "full", "seeds": []}"#).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("seeds")), "{err}");
    }

    #[test]
    fn unknown_fields_and_versions_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"version": 1, "suite": "mixed", "mode": "full", "lr": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"version": 2, "suite": "mixed", "mode": "full"}"#).is_err());
    }

    #[test]
    fn custom_suite_is_a_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("suite.json");
        let specs = taskgen::default_suite(SuiteName::Heterogeneous);
        fs::write(&path, serde_json::to_string(&specs).unwrap()).unwrap();
        let cfg = ExperimentConfig::new(SuiteRef::try_from(path.display().to_string()).unwrap(), Mode::Full);
        assert_eq!(cfg.suite.specs().unwrap(), specs);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&json).unwrap(), cfg);
    }
}
