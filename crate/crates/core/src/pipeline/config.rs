//! Run configuration: one flat TOML table, every key optional.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ConfigError;
use crate::losses::{LossWeights, TripletOptions};
use crate::model::ModelConfig;
use crate::segmenter::{SegmenterConfig, ADAPTERS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// No training; the initialized generator is evaluated as is.
    GroundingOnly,
    /// Box regression and confidence terms only.
    BoxOnly,
    /// Box terms plus both triplet losses.
    BoxPlusContra,
}

impl Arm {
    pub fn is_contrastive(self) -> bool {
        self == Arm::BoxPlusContra
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::GroundingOnly => "grounding_only",
            Arm::BoxOnly => "box_only",
            Arm::BoxPlusContra => "box_plus_contra",
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "grounding_only" => Ok(Arm::GroundingOnly),
            "box_only" => Ok(Arm::BoxOnly),
            "box_plus_contra" => Ok(Arm::BoxPlusContra),
            other => Err(format!("unknown arm {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `learning_rate` down to zero over the run.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Gradient descent with heavy-ball momentum.
    Sgd,
    Adam,
}

/// Every key with its default:
///
/// | key | default | meaning |
/// |---|---|---|
/// | `data_dir` | `"data/train"` | training dataset directory |
/// | `eval_dir` | `""` | evaluation dataset for `ablate`; empty reuses `data_dir` |
/// | `image_size` | 64 | frame side in pixels |
/// | `patch` | 8 | patch side in pixels |
/// | `dim` | 64 | token width |
/// | `heads` | 4 | attention heads |
/// | `layers` | 6 | decoder layers |
/// | `queries` | 8 | object queries per frame |
/// | `ffn_dim` | 128 | decoder feed-forward width |
/// | `prompt_freqs` | 8 | Fourier frequencies per box coordinate |
/// | `lambda_r`, `lambda_g` | 5, 2 | L1 and GIoU weights |
/// | `lambda_f`, `lambda_v` | 0.01, 0.1 | prompt and video triplet weights |
/// | `lambda_cls` | 1 | confidence cross-entropy weight |
/// | `margin` | 0 | triplet margin |
/// | `normalize_embeddings` | false | unit-normalize triplet inputs |
/// | `optimizer` | `"sgd"` | `"sgd"` or `"adam"` |
/// | `learning_rate` | 1e-4 | step size |
/// | `lr_schedule` | `"constant"` | `"constant"` or `"cosine"` |
/// | `momentum` | 0.9 | SGD momentum |
/// | `grad_clip` | 0 | global gradient norm cap, 0 disables |
/// | `epochs` | 12 | passes over all expressions |
/// | `max_steps` | 0 | stop after this many steps, 0 disables |
/// | `batch_size` | 1 | clips per optimizer step |
/// | `clip_len` | 8 | frames per training clip |
/// | `seed` | 0 | initialization and sampling seed |
/// | `arm` | `"box_plus_contra"` | training objective |
/// | `adapter` | `"oracle"` | segmenter used for evaluation |
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: String,
    pub eval_dir: String,
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub queries: usize,
    pub ffn_dim: usize,
    pub prompt_freqs: usize,
    pub lambda_r: f64,
    pub lambda_g: f64,
    pub lambda_f: f64,
    pub lambda_v: f64,
    pub lambda_cls: f64,
    pub margin: f64,
    pub normalize_embeddings: bool,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub grad_clip: f64,
    pub epochs: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    pub clip_len: usize,
    pub seed: u64,
    pub arm: Arm,
    pub adapter: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let w = LossWeights::default();
        Self {
            data_dir: "data/train".into(),
            eval_dir: String::new(),
            image_size: m.image_size,
            patch: m.patch,
            dim: m.dim,
            heads: m.heads,
            layers: m.layers,
            queries: m.queries,
            ffn_dim: m.ffn_dim,
            prompt_freqs: SegmenterConfig::default().freqs,
            lambda_r: w.lambda_r,
            lambda_g: w.lambda_g,
            lambda_f: w.lambda_f,
            lambda_v: w.lambda_v,
            lambda_cls: w.lambda_cls,
            margin: 0.0,
            normalize_embeddings: false,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e-4,
            lr_schedule: LrSchedule::Constant,
            momentum: 0.9,
            grad_clip: 0.0,
            epochs: 12,
            max_steps: 0,
            batch_size: 1,
            clip_len: 8,
            seed: 0,
            arm: Arm::BoxPlusContra,
            adapter: "oracle".into(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Canonical text: every key, in declaration order, with defaults filled in.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of [`RunConfig::canonical`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            patch: self.patch,
            dim: self.dim,
            heads: self.heads,
            layers: self.layers,
            queries: self.queries,
            ffn_dim: self.ffn_dim,
        }
    }

    pub fn segmenter(&self) -> SegmenterConfig {
        SegmenterConfig {
            image_size: self.image_size,
            patch: self.patch,
            dim: self.dim,
            freqs: self.prompt_freqs,
            text_dim: self.dim,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_r: self.lambda_r,
            lambda_g: self.lambda_g,
            lambda_f: self.lambda_f,
            lambda_v: self.lambda_v,
            lambda_cls: self.lambda_cls,
        }
    }

    /// Weights actually optimized under the configured arm.
    pub fn arm_weights(&self) -> LossWeights {
        match self.arm {
            Arm::BoxPlusContra => self.weights(),
            Arm::BoxOnly | Arm::GroundingOnly => self.weights().box_only(),
        }
    }

    /// Step size for step `step` of a run of `total` steps.
    pub fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
            }
        }
    }

    pub fn triplet(&self) -> TripletOptions {
        TripletOptions {
            margin: self.margin,
            normalize: self.normalize_embeddings,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.model()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.weights()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return bad(format!("margin must be non-negative, got {}", self.margin));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return bad(format!("grad_clip must be non-negative, got {}", self.grad_clip));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.clip_len == 0 {
            return bad("clip_len must be at least 1".into());
        }
        if self.prompt_freqs == 0 {
            return bad("prompt_freqs must be at least 1".into());
        }
        if !ADAPTERS.contains(&self.adapter.as_str()) {
            return bad(format!(
                "unknown adapter {:?}, expected one of {ADAPTERS:?}",
                self.adapter
            ));
        }
        Ok(())
    }
}
