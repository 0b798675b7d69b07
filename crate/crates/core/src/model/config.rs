use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of the encoder/decoder graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Token side length in pixels. Must be a power of two >= 2; the decoder
    /// runs `log2(patch_size)` upsampling stages.
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Number of transformer blocks; must be a multiple of 4.
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub in_channels: usize,
    /// Nuclei type channels including background at index 0.
    pub num_nuclei_classes: usize,
    pub num_tissue_classes: usize,
    /// Token-grid side the positional table was built for.
    pub trained_pos_grid: usize,
    /// Output width of each decoder stage, deepest first.
    pub decoder_widths: Vec<usize>,
    /// Rays of the optional star-distance branch; 0 disables it.
    pub star_rays: usize,
}

impl ModelConfig {
    /// ViT-S sized encoder (D = 384, L = 12) on 256 px inputs with 16 px tokens.
    pub fn vit_small() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 384,
            depth: 12,
            heads: 6,
            mlp_ratio: 4,
            in_channels: 3,
            num_nuclei_classes: 6,
            num_tissue_classes: 19,
            trained_pos_grid: 16,
            decoder_widths: default_widths(16),
            star_rays: 0,
        }
    }

    /// Small configuration that runs a 1024 px forward pass in about a second.
    pub fn tiny() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 32,
            depth: 4,
            heads: 2,
            mlp_ratio: 2,
            in_channels: 3,
            num_nuclei_classes: 6,
            num_tissue_classes: 19,
            trained_pos_grid: 16,
            decoder_widths: vec![32, 16, 16, 8],
            star_rays: 0,
        }
    }

    pub fn decoder_stages(&self) -> usize {
        self.patch_size.trailing_zeros() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Block indices (1-based) whose outputs feed the decoder skips.
    pub fn skip_depths(&self) -> [usize; 4] {
        let q = self.depth / 4;
        [q, 2 * q, 3 * q, 4 * q]
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth % 4 != 0 {
            return Err(Error::DepthNotDivisibleBy4(self.depth));
        }
        if self.patch_size < 2 || !self.patch_size.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "patch size {} must be a power of two >= 2",
                self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.decoder_widths.len() != self.decoder_stages() {
            return Err(Error::InvalidConfig(format!(
                "{} decoder widths given, patch size {} needs {}",
                self.decoder_widths.len(),
                self.patch_size,
                self.decoder_stages()
            )));
        }
        let positive = [
            ("mlp_ratio", self.mlp_ratio),
            ("in_channels", self.in_channels),
            ("num_tissue_classes", self.num_tissue_classes),
            ("trained_pos_grid", self.trained_pos_grid),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.num_nuclei_classes < 2 {
            return Err(Error::InvalidConfig(
                "num_nuclei_classes must include background and one nucleus class".into(),
            ));
        }
        if self.decoder_widths.contains(&0) {
            return Err(Error::InvalidConfig("zero decoder width".into()));
        }
        if self.star_rays != 0 && self.star_rays < 3 {
            return Err(Error::BadRayCount(self.star_rays));
        }
        Ok(())
    }
}

/// Stage widths halving towards full resolution, ending at 32: 256, 128, 64,
/// 32 for 16 px tokens.
pub fn default_widths(patch_size: usize) -> Vec<usize> {
    let stages = patch_size.trailing_zeros() as usize;
    (0..stages).map(|s| 32 << (stages - 1 - s)).collect()
}
