//! Resolved run configurations and per-run output directories.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use buftrack::pipeline::TrackerConfig;
use buftrack::synth::GenOptions;
use buftrack::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GenDataConfig {
    pub count: usize,
    pub seed: u64,
    pub options: GenOptions,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            count: 60,
            seed: 0,
            options: GenOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub data: PathBuf,
    /// Preset name or path to a backbone TOML file.
    pub backbone: String,
    pub init_seed: u64,
    pub tracker: TrackerConfig,
    pub train: TrainConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::new(),
            backbone: "desk-tiny".into(),
            init_seed: 0,
            tracker: TrackerConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackRunConfig {
    pub model: PathBuf,
    pub data: PathBuf,
    /// Sequence name inside `data`; `data` itself is the sequence when unset.
    pub sequence: Option<String>,
    pub tracker: TrackerConfig,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalRunConfig {
    pub model: PathBuf,
    pub data: PathBuf,
    pub tracker: TrackerConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DistractorRunConfig {
    pub model: PathBuf,
    pub data: PathBuf,
    pub percentages: Vec<u32>,
    pub seed: u64,
    pub tracker: TrackerConfig,
}

impl Default for DistractorRunConfig {
    fn default() -> Self {
        Self {
            model: PathBuf::new(),
            data: PathBuf::new(),
            percentages: vec![0, 25, 50, 75],
            seed: 0,
            tracker: TrackerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DropRunConfig {
    pub model: PathBuf,
    pub data: PathBuf,
    pub etas: Vec<usize>,
    pub tracker: TrackerConfig,
}

impl Default for DropRunConfig {
    fn default() -> Self {
        Self {
            model: PathBuf::new(),
            data: PathBuf::new(),
            etas: vec![2, 3, 5],
            tracker: TrackerConfig::default(),
        }
    }
}


/// Parses `path` (TOML) or falls back to defaults.
pub fn load<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).map_err(|e| {
                anyhow::Error::new(ConfigSyntax(format!("{}: {}", p.display(), e.message())))
            })
        }
    }
}

/// Malformed config file.
#[derive(Debug)]
pub struct ConfigSyntax(pub String);

impl std::fmt::Display for ConfigSyntax {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigSyntax {}

/// A created run directory holding the resolved config snapshot.
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// `<root>/<command>-<UTC timestamp>-<first 8 hex of sha256(config)>`.
    pub fn create<C: Serialize>(root: &Path, command: &str, config: &C) -> Result<Self> {
        let text = toml::to_string(config).context("serializing resolved config")?;
        let hash = Sha256::digest(format!("{command}\n{text}").as_bytes());
        let hex: String = hash.iter().take(4).map(|b| format!("{b:02x}")).collect();
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
        let path = root.join(format!("{command}-{stamp}-{hex}"));
        std::fs::create_dir_all(&path)
            .with_context(|| format!("creating run directory {}", path.display()))?;
        std::fs::write(path.join("config.toml"), text)?;
        Ok(Self { path })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}
