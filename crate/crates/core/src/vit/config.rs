use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architectural description of a vision transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Desk-scale model used throughout the tests and the quickstart.
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            embed_dim: 32,
            num_heads: 4,
            num_blocks: 6,
            ffn_dim: 128,
            num_classes: 10,
            ln_eps: 1e-12,
        }
    }

    /// ViT-Base geometry at 224×224 with a 10-way head.
    pub fn reference() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 768,
            num_heads: 12,
            num_blocks: 12,
            ffn_dim: 3072,
            num_classes: 10,
            ln_eps: 1e-12,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "reference" | "base" => Some(Self::reference()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("num_blocks", self.num_blocks),
            ("ffn_dim", self.ffn_dim),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.ffn_dim != 4 * self.embed_dim {
            return Err(Error::Config(format!(
                "ffn_dim must be 4*embed_dim = {}, got {}",
                4 * self.embed_dim,
                self.ffn_dim
            )));
        }
        if !(self.ln_eps > 0.0) || !self.ln_eps.is_finite() {
            return Err(Error::Config(format!(
                "ln_eps must be > 0, got {}",
                self.ln_eps
            )));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patch tokens `n`.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length including the CLS token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Flattened patch length `channels·P·P`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }
}
