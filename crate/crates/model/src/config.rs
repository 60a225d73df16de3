use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

/// Architecture hyperparameters.
///
/// The toy profile targets 64×64 slices and runs comfortably on a CPU; the
/// full profile mirrors the 512×512 deployment geometry (α = 0.3, M = 8,
/// 128-channel memory over 128×128 feature maps) with randomly initialized
/// frozen base weights standing in for pretrained ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Expected slice height/width. Tiles fed to the model must be divisible
    /// by 16; this value seeds the default inference window.
    pub input_resolution: usize,
    /// ViT patch edge; pinned to 4 so the token grid is the 1/4-scale map.
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub lora_rank: usize,
    /// Bypass scale; 0 selects the 1/rank default.
    pub lora_scale: f64,
    /// Common channel width of the f4/f8/f16 maps and both decoders.
    pub feature_channels: usize,
    /// Compact memory width `d`.
    pub memory_channels: usize,
    /// Slot count `M`.
    pub memory_slots: usize,
    /// EMA momentum `α`.
    pub memory_momentum: f64,
    pub decoder_blocks: usize,
    pub decoder_heads: usize,
    /// Cap on centroid tokens per prompt.
    pub prompt_max_components: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig {
            input_resolution: 64,
            patch_size: 4,
            embed_dim: 64,
            depth: 2,
            num_heads: 4,
            lora_rank: 4,
            lora_scale: 0.0,
            feature_channels: 32,
            memory_channels: 16,
            memory_slots: 8,
            memory_momentum: 0.3,
            decoder_blocks: 2,
            decoder_heads: 4,
            prompt_max_components: 8,
        }
    }

    pub fn full() -> Self {
        ModelConfig {
            input_resolution: 512,
            patch_size: 4,
            embed_dim: 256,
            depth: 8,
            num_heads: 8,
            lora_rank: 4,
            lora_scale: 0.0,
            feature_channels: 256,
            memory_channels: 128,
            memory_slots: 8,
            memory_momentum: 0.3,
            decoder_blocks: 2,
            decoder_heads: 8,
            prompt_max_components: 8,
        }
    }

    pub fn effective_lora_scale(&self) -> f64 {
        if self.lora_scale > 0.0 {
            self.lora_scale
        } else {
            1.0 / self.lora_rank as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(ModelError::Config(msg));
        if self.patch_size != 4 {
            return err(format!(
                "patch_size must be 4 (token grid is the 1/4-scale map), got {}",
                self.patch_size
            ));
        }
        if self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return err(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.embed_dim % 4 != 0 {
            return err(format!(
                "embed_dim {} must be divisible by 4 for 2D positional encodings",
                self.embed_dim
            ));
        }
        if self.input_resolution % (self.patch_size * 4) != 0 {
            return err(format!(
                "input_resolution {} must be divisible by {}",
                self.input_resolution,
                self.patch_size * 4
            ));
        }
        if self.feature_channels % 4 != 0 || self.feature_channels % self.decoder_heads != 0 {
            return err(format!(
                "feature_channels {} must be divisible by 4 and by decoder_heads {}",
                self.feature_channels, self.decoder_heads
            ));
        }
        if self.memory_channels > self.feature_channels {
            return err(format!(
                "memory_channels {} must not exceed feature_channels {}",
                self.memory_channels, self.feature_channels
            ));
        }
        if self.memory_slots == 0 {
            return err("memory_slots must be >= 1".into());
        }
        if !(self.memory_momentum > 0.0 && self.memory_momentum < 1.0) {
            return err(format!(
                "memory_momentum must lie in (0,1), got {}",
                self.memory_momentum
            ));
        }
        if self.lora_rank == 0 {
            return err("lora_rank must be >= 1".into());
        }
        if self.depth == 0 || self.decoder_blocks == 0 {
            return err("depth and decoder_blocks must be >= 1".into());
        }
        Ok(())
    }
}

/// Which architectural components are active; all on by default.
///
/// Off-paths: no enhancer means the decoders see f4 directly; no memory means
/// slot attention degenerates to the identity and the bank is never updated;
/// no bi-directional prompting means a single decode stage with a zero prompt
/// whose quarter-resolution logits are bilinearly upsampled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub enhancer: bool,
    pub memory: bool,
    pub bidirectional: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            enhancer: true,
            memory: true,
            bidirectional: true,
        }
    }
}

impl AblationFlags {
    pub fn label(&self) -> String {
        let mark = |b: bool| if b { "on" } else { "off" };
        format!(
            "enh={} mem={} bidir={}",
            mark(self.enhancer),
            mark(self.memory),
            mark(self.bidirectional)
        )
    }

    /// All 8 on/off combinations, baseline first, full model last.
    pub fn all_combinations() -> Vec<AblationFlags> {
        let mut out = Vec::with_capacity(8);
        for bits in 0..8u8 {
            out.push(AblationFlags {
                enhancer: bits & 4 != 0,
                memory: bits & 2 != 0,
                bidirectional: bits & 1 != 0,
            });
        }
        out
    }
}
