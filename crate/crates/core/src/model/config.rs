use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Functional form of the per-head projection added to attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CpVariant {
    /// `S = (Q Kᵀ + X M Xᵀ) / sqrt(d_h)` with `X` the head slice of the
    /// normalized tokens. Zero-initialized.
    #[default]
    AdditiveBilinear,
    /// `S = (Q M Kᵀ) / sqrt(d_h)`. Identity-initialized.
    QkBilinear,
}

impl CpVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            CpVariant::AdditiveBilinear => "additive-bilinear",
            CpVariant::QkBilinear => "qk-bilinear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "additive-bilinear" => Ok(CpVariant::AdditiveBilinear),
            "qk-bilinear" => Ok(CpVariant::QkBilinear),
            other => Err(Error::Config(format!("unknown cp_variant `{other}`"))),
        }
    }
}

/// Architecture hyperparameters of the vision transformer.
///
/// The MLP inside each block always has two linear layers.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_dim: usize,
    pub cp_variant: CpVariant,
    /// Prompt tokens per layer; only used by the plain-prompt baseline.
    pub prompt_len: usize,
    /// Seed of the frozen backbone's weights.
    pub init_seed: u64,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl VitConfig {
    /// Desk-scale default: 32x32 RGB, 8-pixel patches, 4 blocks of width 64.
    pub fn toy() -> Self {
        VitConfig {
            image_height: 32,
            image_width: 32,
            channels: 3,
            patch: 8,
            dim: 64,
            heads: 4,
            depth: 4,
            mlp_dim: 128,
            cp_variant: CpVariant::AdditiveBilinear,
            prompt_len: 2,
            init_seed: 0,
        }
    }

    /// ViT-S/16 geometry at 224x224.
    pub fn vit_s16() -> Self {
        VitConfig {
            image_height: 224,
            image_width: 224,
            channels: 3,
            patch: 16,
            dim: 384,
            heads: 6,
            depth: 12,
            mlp_dim: 1536,
            cp_variant: CpVariant::AdditiveBilinear,
            prompt_len: 2,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("channels", self.channels),
            ("patch", self.patch),
            ("dim", self.dim),
            ("heads", self.heads),
            ("depth", self.depth),
            ("mlp_dim", self.mlp_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.image_height.is_multiple_of(self.patch) || !self.image_width.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "patch size {} must divide image size {}x{}",
                self.patch, self.image_height, self.image_width
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch) * (self.image_width / self.patch)
    }

    /// Token count `A = HW / P^2 + 1` (patches plus CLS).
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// Trainable scalars of the coalescent projections: `L * h * d_h^2`.
    pub fn cp_param_count(&self) -> usize {
        self.depth * self.heads * self.head_dim() * self.head_dim()
    }

    /// Trainable scalars of the plain-prompt baseline: `L * prompt_len * d`.
    pub fn prompt_param_count(&self) -> usize {
        self.depth * self.prompt_len * self.dim
    }

    /// Geometry fields only, used when matching checkpoints against configs.
    pub fn geometry(&self) -> String {
        format!(
            "{}x{}x{} patch {} dim {} heads {} depth {} mlp {}",
            self.channels,
            self.image_height,
            self.image_width,
            self.patch,
            self.dim,
            self.heads,
            self.depth,
            self.mlp_dim
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counts() {
        assert_eq!(VitConfig::vit_s16().tokens(), 197);
        assert_eq!(VitConfig::toy().tokens(), 17);
    }

    #[test]
    fn indivisible_patch_is_rejected() {
        let cfg = VitConfig {
            image_height: 30,
            image_width: 30,
            patch: 16,
            ..VitConfig::toy()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = VitConfig {
            heads: 5,
            ..VitConfig::toy()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn parameter_counts() {
        let cfg = VitConfig::toy();
        assert_eq!(cfg.cp_param_count(), 4 * 4 * 16 * 16);
        assert_eq!(cfg.cp_param_count(), cfg.depth * cfg.dim * cfg.dim / cfg.heads);
        assert_eq!(cfg.prompt_param_count(), 2 * 4 * 64);
    }
}
