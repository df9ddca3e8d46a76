//! Model, training and data hyperparameters.
//!
//! [`ModelConfig`] is the single source of truth for every stage of the
//! pipeline. It serializes to JSON (checkpoints embed a snapshot) and accepts
//! dotted `key=value` overrides, e.g. `prompts.boxes=true` or `lr_head=1e-3`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{EscError, Result};

/// Which pseudo-prompt kinds feed the prompt encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptKinds {
    pub points: bool,
    pub boxes: bool,
    pub masks: bool,
}

impl Default for PromptKinds {
    fn default() -> Self {
        Self {
            points: true,
            boxes: false,
            masks: true,
        }
    }
}

impl PromptKinds {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.points {
            parts.push("points");
        }
        if self.boxes {
            parts.push("boxes");
        }
        if self.masks {
            parts.push("masks");
        }
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("+")
        }
    }

    /// Parses a `+`-joined label such as `points+masks`; `all` enables every kind.
    pub fn from_label(label: &str) -> Result<Self> {
        let mut kinds = Self { points: false, boxes: false, masks: false };
        for part in label.split('+').map(str::trim) {
            match part {
                "points" | "point" => kinds.points = true,
                "boxes" | "box" => kinds.boxes = true,
                "masks" | "mask" => kinds.masks = true,
                "all" => kinds = Self { points: true, boxes: true, masks: true },
                _ => return Err(EscError::Config(format!("unknown prompt kind `{part}` in `{label}`"))),
            }
        }
        Ok(kinds)
    }
}

/// Budget of the class-agnostic promptable-segmentation pretraining run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Steps of image-text alignment for the encoders.
    pub encoder_steps: usize,
    pub encoder_lr: f64,
    /// Steps of promptable-segmentation training for the two-way blocks.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_samples: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            encoder_steps: 3000,
            encoder_lr: 2e-3,
            steps: 600,
            batch_size: 8,
            lr: 2e-3,
            eval_samples: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding width of vision/text features.
    pub channels: usize,
    /// Feature-grid height.
    pub height: usize,
    /// Feature-grid width.
    pub width: usize,
    /// Input image side length in pixels.
    pub image_size: usize,
    /// Number of chained ESC blocks.
    pub num_blocks: usize,
    /// Pseudo prompts (points / masks / boxes) per class.
    pub prompts_per_class: usize,
    /// Binarization threshold on the max-normalized probability map.
    pub alpha: f64,
    /// Softmax temperature applied to correlations.
    pub tau: f64,
    /// Spatial attention window side.
    pub window: usize,
    pub heads: usize,
    /// Internal width divisor of the two-way cross attentions.
    pub attn_downsample: usize,
    pub mlp_ratio: usize,
    /// Size of the text embedding table.
    pub n_classes_train: usize,
    /// Channel widths of the toy vision encoder stages (full, half, quarter resolution).
    pub encoder_widths: [usize; 3],
    /// Channel widths of the two decoder upsampling stages.
    pub decoder_widths: [usize; 2],
    pub prompts: PromptKinds,
    /// Whether ESC blocks contain prompt generation and two-way refinement;
    /// without them the fusion module sees the raw image feature.
    pub sam_blocks: bool,
    pub kmeans_restarts: usize,
    pub kmeans_max_iter: usize,

    /// Learning rate of the two-way blocks and prompt encoder.
    pub lr_backbone: f64,
    /// Learning rate of the vision and text encoders.
    pub lr_encoder: f64,
    pub lr_head: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub eval_samples: usize,
    pub seed: u64,
    pub pretrain: PretrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            height: 8,
            width: 8,
            image_size: 32,
            num_blocks: 4,
            prompts_per_class: 5,
            alpha: 0.5,
            tau: 0.07,
            window: 4,
            heads: 4,
            attn_downsample: 2,
            mlp_ratio: 2,
            n_classes_train: crate::harness::synth::VOCABULARY_SIZE,
            encoder_widths: [8, 16, 32],
            decoder_widths: [16, 8],
            prompts: PromptKinds::default(),
            sam_blocks: true,
            kmeans_restarts: 32,
            kmeans_max_iter: 50,
            lr_backbone: 2e-6,
            lr_encoder: 2e-6,
            lr_head: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            epochs: 10,
            samples_per_epoch: 256,
            batch_size: 8,
            eval_samples: 64,
            seed: 0,
            pretrain: PretrainConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Tiny configuration used by finite-difference gradient checks.
    pub fn tiny() -> Self {
        Self {
            channels: 16,
            height: 8,
            width: 8,
            image_size: 32,
            num_blocks: 2,
            prompts_per_class: 2,
            window: 4,
            heads: 2,
            encoder_widths: [2, 4, 8],
            decoder_widths: [4, 2],
            ..Self::default()
        }
    }

    /// The reference toy-scale architecture: C=64, H=W=24, 96 px input.
    pub fn reference_scale() -> Self {
        Self {
            channels: 64,
            height: 24,
            width: 24,
            image_size: 96,
            window: 8,
            encoder_widths: [8, 16, 32],
            decoder_widths: [16, 8],
            ..Self::default()
        }
    }

    pub fn grid_len(&self) -> usize {
        self.height * self.width
    }

    /// Downsampling factor between the image and the stem output (image_size / 4H).
    pub fn stem_stride(&self) -> usize {
        self.image_size / (4 * self.height)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(EscError::Config(m));
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return err("channels, height and width must be positive".into());
        }
        if self.height != self.width {
            return err(format!(
                "feature grid must be square (height {} != width {})",
                self.height, self.width
            ));
        }
        if self.window == 0 || self.height % self.window != 0 || self.width % self.window != 0 {
            return err(format!(
                "window {} must divide the feature grid {}x{}",
                self.window, self.height, self.width
            ));
        }
        if self.image_size % self.height != 0 {
            return err(format!(
                "image_size {} is not an integer multiple of the feature grid {}",
                self.image_size, self.height
            ));
        }
        if self.image_size % (4 * self.height) != 0 {
            return err(format!(
                "image_size {} must be a multiple of 4 x grid ({}) to provide two skip resolutions",
                self.image_size,
                4 * self.height
            ));
        }
        if self.num_blocks == 0 {
            return err("num_blocks must be at least 1".into());
        }
        if self.prompts_per_class == 0 {
            return err("prompts_per_class must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return err(format!("alpha {} must lie in (0, 1]", self.alpha));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return err(format!("tau {} must be positive", self.tau));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return err(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            ));
        }
        if self.attn_downsample == 0
            || self.channels % self.attn_downsample != 0
            || (self.channels / self.attn_downsample) % self.heads != 0
        {
            return err(format!(
                "channels {} / attn_downsample {} must be divisible by heads {}",
                self.channels, self.attn_downsample, self.heads
            ));
        }
        if self.channels % 2 != 0 {
            return err("channels must be even for Fourier positional encodings".into());
        }
        if self.mlp_ratio == 0 {
            return err("mlp_ratio must be positive".into());
        }
        if self.n_classes_train == 0 {
            return err("n_classes_train must be positive".into());
        }
        if self.encoder_widths.iter().any(|&w| w == 0) || self.decoder_widths.iter().any(|&w| w == 0)
        {
            return err("encoder/decoder widths must be positive".into());
        }
        if [
            self.lr_backbone,
            self.lr_encoder,
            self.lr_head,
            self.pretrain.lr,
            self.pretrain.encoder_lr,
        ]
        .iter()
            .any(|lr| !(lr.is_finite() && *lr >= 0.0))
        {
            return err("learning rates must be finite and non-negative".into());
        }
        if self.batch_size == 0 || self.pretrain.batch_size == 0 {
            return err("batch sizes must be positive".into());
        }
        if self.kmeans_restarts == 0 || self.kmeans_max_iter == 0 {
            return err("kmeans_restarts and kmeans_max_iter must be positive".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EscError::io(path, e))?;
        let cfg: ModelConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| EscError::io(path, e))
    }

    /// Applies one `dotted.key=value` override. The key must already exist;
    /// the value is parsed as JSON when possible and as a bare string otherwise.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| EscError::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = match slot {
                Value::Object(map) => map
                    .get_mut(part)
                    .ok_or_else(|| EscError::Config(format!("unknown config key `{key}`")))?,
                Value::Array(items) => {
                    let idx: usize = part
                        .parse()
                        .map_err(|_| EscError::Config(format!("unknown config key `{key}`")))?;
                    items
                        .get_mut(idx)
                        .ok_or_else(|| EscError::Config(format!("unknown config key `{key}`")))?
                }
                _ => return Err(EscError::Config(format!("unknown config key `{key}`"))),
            };
        }
        let raw = raw.trim();
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let updated: ModelConfig = serde_json::from_value(root)
            .map_err(|e| EscError::Config(format!("override `{assignment}`: {e}")))?;
        *self = updated;
        Ok(())
    }

    pub fn with_overrides<S: AsRef<str>>(mut self, overrides: &[S]) -> Result<Self> {
        for o in overrides {
            self.apply_override(o.as_ref())?;
        }
        self.validate()?;
        Ok(self)
    }
}
