use std::path::{Path, PathBuf};

use protodep::dataio::{SplitName, SyntheticSpec};
use protodep::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub m_values: Vec<usize>,
    pub k_values: Vec<usize>,
    /// Defaults to the training seed.
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            m_values: vec![3, 7, 11],
            k_values: vec![3],
            seeds: vec![],
        }
    }
}

/// Random-state gradient check sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub dim: usize,
    pub users: usize,
    pub max_tweets: usize,
    pub m: usize,
    pub k: usize,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            users: 6,
            max_tweets: 12,
            m: 3,
            k: 2,
            tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides `train.seed` and `synth.seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Defaults to `base_prototypes.json` inside `data`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_prototypes: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    pub split: SplitName,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub user_id: Option<String>,
    pub top_q: usize,
    pub train: TrainConfig,
    pub synth: SyntheticSpec,
    pub sweep: SweepConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            data: None,
            base_prototypes: None,
            lexicon: None,
            checkpoint: None,
            out: PathBuf::from("out"),
            split: SplitName::Test,
            user_id: None,
            top_q: 3,
            train: TrainConfig::default(),
            synth: SyntheticSpec::default(),
            sweep: SweepConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::input(format!("cannot read config {}: {e}", path.display())))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| Failure::input(format!("config {}: {}", path.display(), e.trim())))
    }

    /// Folds the top-level seed into the sections it overrides.
    pub fn resolve(mut self) -> Self {
        if let Some(s) = self.seed.take() {
            self.train.seed = s;
            self.synth.seed = s;
        }
        if self.sweep.seeds.is_empty() {
            self.sweep.seeds = vec![self.train.seed];
        }
        self
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<(), Failure> {
        let text = toml::to_string_pretty(self).map_err(|e| Failure::input(format!("config: {e}")))?;
        crate::commands::write_file(&dir.join(RESOLVED_CONFIG_FILE), text.as_bytes())
    }

    pub fn data_dir(&self) -> Result<&Path, Failure> {
        self.data.as_deref().ok_or_else(|| Failure::input("no dataset given (use --data)"))
    }

    pub fn checkpoint_path(&self) -> Result<&Path, Failure> {
        self.checkpoint.as_deref().ok_or_else(|| Failure::input("no checkpoint given (use --checkpoint)"))
    }
}

/// Parses `m=3,7,11;k=2,3`. Axes left out keep their configured values.
pub fn parse_grid(spec: &str, sweep: &mut SweepConfig) -> Result<(), Failure> {
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, values) = part
            .split_once('=')
            .ok_or_else(|| Failure::input(format!("grid entry {part:?} is not key=values")))?;
        let values: Vec<usize> = values
            .split(',')
            .map(|v| v.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| Failure::input(format!("grid entry {part:?} has a non-integer value")))?;
        match key.trim() {
            "m" => sweep.m_values = values,
            "k" => sweep.k_values = values,
            other => return Err(Failure::input(format!("unknown grid axis {other:?} (expected m or k)"))),
        }
    }
    Ok(())
}
