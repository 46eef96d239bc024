//! Operator configuration file (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::DEFAULT_STALENESS_THRESHOLD;
use crate::scheduler::Policy;
use crate::shipping::Strategy;
use crate::value::Tick;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub fleet: Option<PathBuf>,
    pub components_dir: Option<PathBuf>,
    pub store_dir: Option<PathBuf>,
    pub policy: Policy,
    pub strategy: Strategy,
    pub staleness_threshold: Tick,
    pub shipping_budget: Tick,
    pub required_charge_pct: u8,
    pub retry_budget: u32,
    pub seed: u64,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            fleet: None,
            components_dir: None,
            store_dir: None,
            policy: Policy::default(),
            strategy: Strategy::Push { origin_fanout: 4 },
            staleness_threshold: DEFAULT_STALENESS_THRESHOLD,
            shipping_budget: 50,
            required_charge_pct: 20,
            retry_budget: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

impl CliConfig {
    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<CliConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: CliConfig = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.fleet, &mut cfg.components_dir, &mut cfg.store_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Input paths must exist; the store directory is created on demand.
    /// Numeric parameters must be positive.
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, p) in [("fleet", &self.fleet), ("components_dir", &self.components_dir)] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(ConfigError::Invalid(format!("{name} {} does not exist", p.display())));
                }
            }
        }
        let positive = [
            ("staleness_threshold", self.staleness_threshold),
            ("shipping_budget", self.shipping_budget),
            ("retry_budget", u64::from(self.retry_budget)),
            ("policy.market.renewal_period", self.policy.market.renewal_period),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        if self.required_charge_pct > 100 {
            return Err(ConfigError::Invalid("required_charge_pct must be at most 100".into()));
        }
        self.strategy.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}
