use crate::error::{ensure, Result};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ViTConfig {
    /// Square input side `H = W`.
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// FFN hidden width is `mlp_ratio * embed_dim`.
    pub mlp_ratio: usize,
    /// Channel schedule: 1x1 projection output, then one entry per upsampling
    /// stage. Empty means no decoder (only meaningful for parameter counts).
    pub decoder_channels: Vec<usize>,
}

impl ViTConfig {
    /// ViT-Base/16 at 512x512 with a four-stage decoder.
    pub fn base16() -> Self {
        Self {
            image_size: 512,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            decoder_channels: vec![256, 128, 64, 32, 16],
        }
    }

    /// 16x16 input, 4x4 patches, width 8, two layers.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 4,
            decoder_channels: vec![8, 4, 2],
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// `N_p = H * W / P^2`.
    pub fn num_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }

    /// Number of 2x upsampling stages, `log2(P)`.
    pub fn upsample_stages(&self) -> usize {
        self.patch_size.trailing_zeros() as usize
    }

    /// Checks the invariants needed to count parameters and FLOPs.
    pub fn validate_shape(&self) -> Result<()> {
        ensure!(self.patch_size >= 1, InvalidParameter, "patch size must be >= 1");
        ensure!(
            self.image_size > 0 && self.image_size % self.patch_size == 0,
            InvalidParameter,
            "image size {} not divisible by patch size {}",
            self.image_size,
            self.patch_size
        );
        ensure!(
            self.patch_size.is_power_of_two(),
            InvalidParameter,
            "patch size {} must be a power of two for 2x upsampling stages",
            self.patch_size
        );
        ensure!(self.embed_dim >= 1 && self.heads >= 1, InvalidParameter, "embed_dim and heads must be >= 1");
        ensure!(
            self.embed_dim % self.heads == 0,
            InvalidParameter,
            "embed_dim {} not divisible by {} heads",
            self.embed_dim,
            self.heads
        );
        ensure!(self.mlp_ratio >= 1, InvalidParameter, "mlp_ratio must be >= 1");
        ensure!(
            self.decoder_channels.is_empty() || self.decoder_channels.len() == self.upsample_stages() + 1,
            InvalidParameter,
            "decoder needs {} channel entries for patch size {}, got {}",
            self.upsample_stages() + 1,
            self.patch_size,
            self.decoder_channels.len()
        );
        ensure!(
            self.decoder_channels.iter().all(|&c| c >= 1),
            InvalidParameter,
            "decoder channels must be >= 1"
        );
        Ok(())
    }

    /// Checks everything a runnable model needs.
    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        ensure!(self.depth >= 1, InvalidParameter, "depth must be >= 1");
        ensure!(!self.decoder_channels.is_empty(), InvalidParameter, "a runnable model needs a decoder");
        Ok(())
    }
}
