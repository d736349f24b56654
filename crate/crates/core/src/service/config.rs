use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::ServiceError;
use crate::engine::EngineParams;
use crate::event::{FactorSchema, TypeId};
use crate::pls::DEFAULT_EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Batch,
    Online,
}

/// How often new data is pulled in. In online mode a duration also sets the
/// checkpoint autosave interval; `manual` saves only on request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdatePeriod {
    Manual,
    Every(Duration),
}

impl FromStr for UpdatePeriod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim().eq_ignore_ascii_case("manual") {
            return Ok(Self::Manual);
        }
        let period = humantime::parse_duration(s.trim()).map_err(|e| format!("update_period {s:?}: {e}"))?;
        if period.is_zero() {
            return Err("update_period must be positive".into());
        }
        Ok(Self::Every(period))
    }
}

impl std::fmt::Display for UpdatePeriod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Manual => f.write_str("manual"),
            Self::Every(d) => write!(f, "{}", humantime::format_duration(*d)),
        }
    }
}

impl Serialize for UpdatePeriod {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for UpdatePeriod {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

fn default_period() -> UpdatePeriod {
    UpdatePeriod::Manual
}

fn default_mode() -> Mode {
    Mode::Batch
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_listen() -> String {
    "127.0.0.1:8080".to_owned()
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default = "default_period")]
    pub update_period: UpdatePeriod,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub history_path: PathBuf,
    pub checkpoint_path: PathBuf,
    #[serde(default = "default_listen")]
    pub listen_address: String,
    /// One tick report per line, if set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics_path: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub auto_register_types: bool,
    /// Explicit factor schemas per violation type.
    #[serde(default)]
    pub types: BTreeMap<TypeId, FactorSchema>,
}

impl EngineConfig {
    /// Config with default settings around the given storage paths.
    pub fn with_paths(history_path: impl Into<PathBuf>, checkpoint_path: impl Into<PathBuf>) -> Self {
        Self {
            update_period: default_period(),
            mode: default_mode(),
            epsilon: default_epsilon(),
            history_path: history_path.into(),
            checkpoint_path: checkpoint_path.into(),
            listen_address: default_listen(),
            diagnostics_path: None,
            auto_register_types: true,
            types: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ServiceError> {
        let config: Self = toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))?;
        if !(config.epsilon.is_finite() && config.epsilon >= 0.0) {
            return Err(ServiceError::Config(format!(
                "epsilon must be finite and nonnegative, got {}",
                config.epsilon
            )));
        }
        Ok(config)
    }

    /// Opens every output path for appending, creating missing files.
    pub fn check_writable(&self) -> Result<(), ServiceError> {
        let paths = [Some(&self.history_path), Some(&self.checkpoint_path), self.diagnostics_path.as_ref()];
        for path in paths.into_iter().flatten() {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| ServiceError::Config(format!("{} is not writable: {e}", path.display())))?;
        }
        Ok(())
    }

    pub fn engine_params(&self) -> EngineParams {
        EngineParams {
            epsilon: self.epsilon,
            auto_register_types: self.auto_register_types,
            schemas: self.types.clone(),
        }
    }
}
