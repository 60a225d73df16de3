//! Run configuration: one TOML file drives every subcommand. Unknown keys
//! are rejected; every field has a default, so an empty file is valid.

use emstack_model::ModelConfig;
use emstack_pipeline::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Architecture profile providing model defaults: "toy" or "full".
    pub profile: String,
    /// Scalar type for training/inference runs: "f32" or "f64".
    pub dtype: String,
    /// Explicit model hyperparameters; overrides the profile when present.
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub ablate: AblateConfig,
    pub synth: SynthConfig,
    pub io: IoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            profile: "toy".into(),
            dtype: "f32".into(),
            model: None,
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            ablate: AblateConfig::default(),
            synth: SynthConfig::default(),
            io: IoConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub window: usize,
    pub overlap: usize,
    pub threshold: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            window: 64,
            overlap: 16,
            threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Shared step budget per component combination.
    pub steps: u64,
    pub seeds: Vec<u64>,
    pub kind: String,
    pub depth: usize,
    pub size: usize,
    pub data_seed: u64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            steps: 400,
            seeds: vec![1, 2, 3],
            kind: "branching".into(),
            depth: 10,
            size: 32,
            data_seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub kind: String,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            kind: "drifting-blob".into(),
            depth: 24,
            height: 64,
            width: 64,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Stack paths: slice directories or raw-volume manifests.
    pub stacks: Vec<String>,
    /// Optional mask-directory overrides, aligned with `stacks`.
    pub mask_dirs: Vec<String>,
    pub out_dir: String,
    /// Checkpoint consumed by infer/eval and written by train.
    pub checkpoint: String,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            stacks: Vec::new(),
            mask_dirs: Vec::new(),
            out_dir: "runs/out".into(),
            checkpoint: String::new(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Runtime(format!("config encode: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.profile != "toy" && self.profile != "full" {
            return Err(CliError::Config(format!(
                "profile must be \"toy\" or \"full\", got {:?}",
                self.profile
            )));
        }
        if self.dtype != "f32" && self.dtype != "f64" {
            return Err(CliError::Config(format!(
                "dtype must be \"f32\" or \"f64\", got {:?}",
                self.dtype
            )));
        }
        self.model_config()?.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if !self.io.mask_dirs.is_empty() && self.io.mask_dirs.len() != self.io.stacks.len() {
            return Err(CliError::Config(format!(
                "{} mask_dirs for {} stacks",
                self.io.mask_dirs.len(),
                self.io.stacks.len()
            )));
        }
        Ok(())
    }

    /// Effective model hyperparameters.
    pub fn model_config(&self) -> Result<ModelConfig> {
        if let Some(m) = &self.model {
            return Ok(m.clone());
        }
        Ok(match self.profile.as_str() {
            "full" => ModelConfig::full(),
            _ => ModelConfig::toy(),
        })
    }
}
