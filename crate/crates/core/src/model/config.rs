use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

fn default_channels() -> usize {
    1
}

fn default_ffn_multiplier() -> usize {
    4
}

/// Architecture hyperparameters of the backbone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Side length in pixels of the square input image.
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    #[serde(default = "default_ffn_multiplier")]
    pub ffn_multiplier: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let field = |name: &str, msg: String| Err(ConfigError::field(format!("model.{name}"), msg));
        if self.patch_size == 0 || self.image_size == 0 {
            return field("patch_size", "image and patch size must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return field(
                "patch_size",
                format!(
                    "image_size {} is not divisible by patch_size {}",
                    self.image_size, self.patch_size
                ),
            );
        }
        if self.channels == 0 {
            return field("channels", "must be at least 1".into());
        }
        if self.num_heads == 0 {
            return field("num_heads", "must be at least 1".into());
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return field(
                "embed_dim",
                format!(
                    "embed_dim {} must be a positive multiple of num_heads {}",
                    self.embed_dim, self.num_heads
                ),
            );
        }
        if self.num_blocks == 0 {
            return field("num_blocks", "must be at least 1".into());
        }
        if self.ffn_multiplier == 0 {
            return field("ffn_multiplier", "must be at least 1".into());
        }
        if self.num_classes == 0 {
            return field("num_classes", "must be at least 1".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patches plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn ffn_hidden(&self) -> usize {
        self.embed_dim * self.ffn_multiplier
    }

    /// Flattened length of one raw patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_len(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }

    /// Whether block `l` (0-based) carries a decision network. The first
    /// block always runs in full.
    pub fn has_decision(&self, block: usize) -> bool {
        block >= 1 && block < self.num_blocks
    }

    /// Number of blocks with decision networks.
    pub fn decision_blocks(&self) -> usize {
        self.num_blocks.saturating_sub(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            embed_dim: 8,
            num_heads: 2,
            num_blocks: 2,
            ffn_multiplier: 4,
            num_classes: 3,
        }
    }

    #[test]
    fn derived_sizes() {
        let c = base();
        c.validate().unwrap();
        assert_eq!(c.num_patches(), 4);
        assert_eq!(c.num_tokens(), 5);
        assert_eq!(c.head_dim(), 4);
        assert_eq!(c.patch_dim(), 16);
        assert!(!c.has_decision(0) && c.has_decision(1));
    }

    #[test]
    fn rejects_bad_divisibility() {
        let mut c = base();
        c.patch_size = 3;
        assert!(c.validate().unwrap_err().to_string().contains("model.patch_size"));
        let mut c = base();
        c.embed_dim = 9;
        assert!(c.validate().is_err());
        let mut c = base();
        c.num_blocks = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let json = r#"{"image_size":8,"patch_size":4,"embed_dim":8,"num_heads":2,
            "num_blocks":1,"num_classes":2,"dropout":0.1}"#;
        assert!(serde_json::from_str::<ModelConfig>(json).is_err());
    }
}
