//! Pipeline configuration: one JSON document, paths relative to its folder.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tad_core::geometry::TravelAxis;
use tad_core::incidents::RuleConfig;
use tad_core::simulation::LoopConfig;
use tad_core::tracking::TrackerConfig;
use thiserror::Error;

/// Environment variable that takes precedence over `--config`.
pub const CONFIG_ENV: &str = "TAD_CONFIG";
pub const DEFAULT_CONFIG: &str = "tad.json";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config {path} is not valid: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("config is invalid: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    #[serde(default)]
    pub axis: TravelAxis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SourceConfig {
    File { path: PathBuf },
    Stdin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreConfig {
    /// Holds `events.jsonl`, `verdicts.jsonl` and `rejects.jsonl`.
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
    pub work_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurationConfig {
    /// Manifest and model registry directory.
    pub dir: PathBuf,
    #[serde(default)]
    pub trainer: Option<TrainerConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub channels: BTreeMap<String, ChannelConfig>,
    #[serde(default)]
    pub rules: RuleConfig,
    #[serde(default)]
    pub tracker: TrackerConfig,
    #[serde(default)]
    pub source: Option<SourceConfig>,
    pub store: StoreConfig,
    #[serde(default)]
    pub curation: Option<CurationConfig>,
    #[serde(default)]
    pub server: ServerConfig,
    #[serde(default)]
    pub simulation: Option<LoopConfig>,
}

impl PipelineConfig {
    /// A config with the default rules and a store at `store_dir`.
    pub fn new(store_dir: impl Into<PathBuf>) -> Self {
        Self {
            channels: BTreeMap::new(),
            rules: RuleConfig::default(),
            tracker: TrackerConfig::default(),
            source: None,
            store: StoreConfig { dir: store_dir.into() },
            curation: None,
            server: ServerConfig::default(),
            simulation: None,
        }
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text, path)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.store.dir);
        if let Some(SourceConfig::File { path }) = &mut self.source {
            fix(path);
        }
        if let Some(c) = &mut self.curation {
            fix(&mut c.dir);
            if let Some(t) = &mut c.trainer {
                fix(&mut t.work_dir);
                if t.program.components().count() > 1 {
                    fix(&mut t.program);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.rules.validate().map_err(ConfigError::Invalid)?;
        let t = &self.tracker;
        if !(t.iou_threshold > 0.0 && t.iou_threshold < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "tracker.iou_threshold must lie in (0, 1), got {}",
                t.iou_threshold
            )));
        }
        if t.min_hits == 0 || t.detection_stride == 0 || t.history_len == 0 {
            return Err(ConfigError::Invalid(
                "tracker.min_hits, detection_stride and history_len must be positive".into(),
            ));
        }
        if (self.rules.judgment_window_frames as usize) > t.history_len {
            return Err(ConfigError::Invalid(format!(
                "tracker.history_len {} is shorter than the judgment window {}",
                t.history_len, self.rules.judgment_window_frames
            )));
        }
        for name in self.channels.keys() {
            if name.is_empty() || name.contains('/') {
                return Err(ConfigError::Invalid(format!(
                    "channel name `{name}` must be non-empty without '/'"
                )));
            }
        }
        Ok(())
    }

    pub fn axis(&self, channel: &str) -> Option<TravelAxis> {
        self.channels.get(channel).map(|c| c.axis)
    }
}

/// Config path: `TAD_CONFIG` if set, else `--config`, else `tad.json`.
pub fn resolve_config_path(cli: Option<&Path>) -> PathBuf {
    resolve_with(std::env::var_os(CONFIG_ENV).map(PathBuf::from), cli)
}

fn resolve_with(env: Option<PathBuf>, cli: Option<&Path>) -> PathBuf {
    env.filter(|p| !p.as_os_str().is_empty())
        .or_else(|| cli.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_CONFIG))
}
