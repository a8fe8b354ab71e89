//! Model, prompt and run configuration.
//!
//! Config files are TOML with one table per section (`[model]`, `[prompt]`,
//! `[loss]`, `[sampling]`, `[train]`, `[clip]`). Every key has a default, so
//! an empty file is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed_provider::ProviderConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::sampling::SamplerConfig;
use crate::trainer::TrainConfig;

/// Per-branch switches for the modality and content prompts.
///
/// All four off reduces the prompt encoder to plain box prompting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptBranchConfig {
    pub use_text_clip: bool,
    pub use_modality_embedding: bool,
    pub use_image_clip: bool,
    pub use_cnn_encoder: bool,
}

impl Default for PromptBranchConfig {
    fn default() -> Self {
        Self::all()
    }
}

impl PromptBranchConfig {
    pub const fn all() -> Self {
        Self {
            use_text_clip: true,
            use_modality_embedding: true,
            use_image_clip: true,
            use_cnn_encoder: true,
        }
    }

    pub const fn none() -> Self {
        Self {
            use_text_clip: false,
            use_modality_embedding: false,
            use_image_clip: false,
            use_cnn_encoder: false,
        }
    }

    /// A modality token is produced when either modality branch is on.
    pub fn modality_enabled(&self) -> bool {
        self.use_text_clip || self.use_modality_embedding
    }

    /// The contrastive pair needs both content branches.
    pub fn contrastive_enabled(&self) -> bool {
        self.use_image_clip && self.use_cnn_encoder
    }

    /// The eight branch combinations of the ablation table, in its row order.
    pub fn ablation_rows() -> [PromptBranchConfig; 8] {
        let row = |t, m, i, c| PromptBranchConfig {
            use_text_clip: t,
            use_modality_embedding: m,
            use_image_clip: i,
            use_cnn_encoder: c,
        };
        [
            row(false, false, false, false),
            row(false, true, true, true),
            row(true, false, true, true),
            row(true, true, false, false),
            row(true, true, false, true),
            row(true, true, true, false),
            row(false, false, true, true),
            row(true, true, true, true),
        ]
    }
}

/// Architecture hyperparameters.
///
/// Derived sizes: embedding grid `G = img_size / patch_size`, mask logits at
/// `4G`, CNN content crop at `4G` (two stride-2 stages back down to `G`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub img_size: usize,
    pub patch_size: usize,
    /// Decoder and prompt token width `D`.
    pub embed_dim: usize,
    pub vit_width: usize,
    pub vit_depth: usize,
    pub vit_heads: usize,
    pub vit_mlp_ratio: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub decoder_mlp_dim: usize,
    pub attention_downsample: usize,
    /// Width of the frozen text/image embeddings.
    pub clip_dim: usize,
    /// Side length of the crop handed to the frozen image embedder.
    pub clip_crop: usize,
    pub num_modalities: usize,
    /// Seed for parameter initialisation and the fixed positional basis.
    pub seed: u64,
    pub prompt: PromptBranchConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            img_size: 256,
            patch_size: 16,
            embed_dim: 256,
            vit_width: 128,
            vit_depth: 4,
            vit_heads: 4,
            vit_mlp_ratio: 4,
            decoder_depth: 2,
            decoder_heads: 8,
            decoder_mlp_dim: 1024,
            attention_downsample: 2,
            clip_dim: 512,
            clip_crop: 224,
            num_modalities: 11,
            seed: 0,
            prompt: PromptBranchConfig::all(),
        }
    }
}

impl ModelConfig {
    /// Small configuration used for CPU training runs and the overfit check:
    /// 64 px inputs, 16x16 grid, width 64, mask logits at input resolution.
    pub fn toy() -> Self {
        Self {
            img_size: 64,
            patch_size: 4,
            embed_dim: 64,
            vit_width: 64,
            vit_depth: 2,
            vit_heads: 4,
            vit_mlp_ratio: 2,
            decoder_depth: 2,
            decoder_heads: 4,
            decoder_mlp_dim: 128,
            attention_downsample: 2,
            clip_dim: 64,
            clip_crop: 32,
            num_modalities: 3,
            seed: 0,
            prompt: PromptBranchConfig::all(),
        }
    }

    /// 4x4 grid, width 16: small enough for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            img_size: 16,
            patch_size: 4,
            embed_dim: 16,
            vit_width: 16,
            vit_depth: 1,
            vit_heads: 2,
            vit_mlp_ratio: 2,
            decoder_depth: 1,
            decoder_heads: 2,
            decoder_mlp_dim: 16,
            attention_downsample: 2,
            clip_dim: 16,
            clip_crop: 16,
            num_modalities: 3,
            seed: 0,
            prompt: PromptBranchConfig::all(),
        }
    }

    pub fn grid(&self) -> usize {
        self.img_size / self.patch_size
    }

    pub fn mask_size(&self) -> usize {
        4 * self.grid()
    }

    pub fn content_crop(&self) -> usize {
        4 * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.img_size % self.patch_size != 0 {
            return fail(format!(
                "img_size {} must be a multiple of patch_size {}",
                self.img_size, self.patch_size
            ));
        }
        if self.embed_dim % 8 != 0 || self.embed_dim == 0 {
            return fail(format!("embed_dim {} must be a positive multiple of 8", self.embed_dim));
        }
        if self.embed_dim % 4 != 0 || (self.embed_dim / 2) % 2 != 0 {
            return fail("embed_dim must be divisible by 4".into());
        }
        if self.vit_heads == 0 || self.vit_width % self.vit_heads != 0 {
            return fail("vit_width must be divisible by vit_heads".into());
        }
        let inner = self.embed_dim / self.attention_downsample.max(1);
        if self.decoder_heads == 0 || inner % self.decoder_heads != 0 {
            return fail("embed_dim / attention_downsample must be divisible by decoder_heads".into());
        }
        if self.num_modalities == 0 {
            return fail("num_modalities must be at least 1".into());
        }
        if self.clip_dim == 0 || self.clip_crop < 8 {
            return fail("clip_dim must be positive and clip_crop at least 8".into());
        }
        Ok(())
    }
}

/// Where the dataset and outputs live.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: Option<std::path::PathBuf>,
    pub out_dir: Option<std::path::PathBuf>,
}

/// Full run configuration as read from a config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub prompt: PromptBranchConfig,
    pub loss: LossConfig,
    pub sampling: SamplerConfig,
    pub train: TrainConfig,
    pub clip: ProviderConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.prompt = cfg.prompt;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Copies the `[prompt]` section into the model config after overrides.
    pub fn sync(&mut self) {
        self.model.prompt = self.prompt;
    }
}
