//! TOML run configuration. Every field has a default, so an empty file is a
//! valid config; command-line flags override individual values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::caption::{RetryPolicy, DEFAULT_PROMPT};
use crate::conditioning::{PoseTokenMode, Variant};
use crate::dataset::{PipelineSettings, MANIFEST_FILE};
use crate::diffusion::train::TrainSettings;
use crate::diffusion::{make_schedule, DenoiserConfig, DiffusionSchedule, SampleOptions};
use crate::pose::DEFAULT_PCKH_ALPHA;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: toml::de::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// One sub-directory per video with frames and `poses.jsonl`.
    pub frames: PathBuf,
    /// Output of `dataset build`; manifest and assets live here.
    pub dataset: PathBuf,
    /// Defaults to `<dataset>/manifest.jsonl`.
    pub manifest: Option<PathBuf>,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            frames: "data/videos".into(),
            dataset: "data/dataset".into(),
            manifest: None,
            checkpoints: "runs/checkpoints".into(),
            reports: "runs/reports".into(),
        }
    }
}

impl Paths {
    pub fn manifest_path(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.dataset.join(MANIFEST_FILE))
    }

    /// Directory that manifest asset paths are relative to.
    pub fn manifest_root(&self) -> PathBuf {
        self.manifest_path().parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditioningSettings {
    pub variant: Variant,
    pub pose_mode: PoseTokenMode,
    /// Seed of the toy image and text encoders and of the projection init.
    pub encoder_seed: u64,
}

impl Default for ConditioningSettings {
    fn default() -> Self {
        Self { variant: Variant::ImgPoseText, pose_mode: PoseTokenMode::Target, encoder_seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionSettings {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sampling: SampleOptions,
}

impl Default for DiffusionSettings {
    fn default() -> Self {
        Self { timesteps: 100, beta_start: 1e-4, beta_end: 0.02, sampling: SampleOptions::default() }
    }
}

impl DiffusionSettings {
    pub fn schedule(&self) -> Result<DiffusionSchedule, ConfigError> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end).map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptionSettings {
    /// Overrides the endpoint environment variable.
    pub endpoint: Option<String>,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub prompt: String,
    pub retry: RetryPolicy,
}

impl Default for CaptionSettings {
    fn default() -> Self {
        Self {
            endpoint: None,
            timeout_secs: 60,
            max_in_flight: 4,
            prompt: DEFAULT_PROMPT.to_string(),
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub pckh_alpha: f64,
    pub feature_resolution: u32,
    pub feature_dim: usize,
    pub feature_seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            pckh_alpha: DEFAULT_PCKH_ALPHA,
            feature_resolution: 16,
            feature_dim: 16,
            feature_seed: crate::eval::RandomProjectionExtractor::DEFAULT_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub pipeline: PipelineSettings,
    pub conditioning: ConditioningSettings,
    pub diffusion: DiffusionSettings,
    pub model: DenoiserConfig,
    pub train: TrainSettings,
    pub caption: CaptionSettings,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            pipeline: PipelineSettings::default(),
            conditioning: ConditioningSettings::default(),
            diffusion: DiffusionSettings::default(),
            model: DenoiserConfig::default(),
            train: TrainSettings::default(),
            caption: CaptionSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let cfg = Self::from_toml(&text).map_err(|source| ConfigError::Parse { path: path.display().to_string(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.pipeline.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.diffusion.schedule()?;
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        let s = &self.diffusion.sampling;
        if !s.guidance_weight.is_finite() || s.guidance_weight < 0.0 {
            return invalid("diffusion.sampling.guidance_weight must be finite and >= 0");
        }
        if s.steps == 0 {
            return invalid("diffusion.sampling.steps must be >= 1");
        }
        let m = &self.model;
        if m.resolution < 4 || m.resolution % 2 != 0 {
            return invalid("model.resolution must be even and >= 4");
        }
        if m.base_width == 0 || m.attention_dim == 0 || m.context_width == 0 || m.image_channels == 0 {
            return invalid("model widths must be positive");
        }
        let t = &self.train;
        if !(0.0..=1.0).contains(&t.cond_dropout) {
            return invalid("train.cond_dropout must be in [0, 1]");
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return invalid("train.learning_rate must be positive");
        }
        if t.batch_size == 0 {
            return invalid("train.batch_size must be >= 1");
        }
        if !(self.eval.pckh_alpha > 0.0) {
            return invalid("eval.pckh_alpha must be positive");
        }
        if self.eval.feature_dim == 0 || self.eval.feature_resolution == 0 {
            return invalid("eval feature sizes must be positive");
        }
        Ok(())
    }
}
