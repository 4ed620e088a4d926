use std::fmt;

use serde::{Deserialize, Serialize};

use super::{CpVariant, VitConfig};
use crate::error::{Error, Result};
use crate::tensor::{Real, RngStream, StreamPurpose, Tensor};

/// One `d_h x d_h` matrix per (layer, head), the complete trainable set in
/// CP mode.
///
/// The additive variant starts at zero and the qk variant at the identity,
/// so an untrained model computes exactly what the frozen backbone computes.
#[derive(Clone, Debug, PartialEq)]
pub struct CoalescentProjection<F: Real> {
    pub variant: CpVariant,
    /// `matrices[layer][head]`.
    pub matrices: Vec<Vec<Tensor<F>>>,
}

impl<F: Real> CoalescentProjection<F> {
    pub fn init(cfg: &VitConfig) -> Self {
        let dh = cfg.head_dim();
        let make = || match cfg.cp_variant {
            CpVariant::AdditiveBilinear => Tensor::zeros(&[dh, dh]),
            CpVariant::QkBilinear => Tensor::eye(dh),
        };
        CoalescentProjection {
            variant: cfg.cp_variant,
            matrices: (0..cfg.depth)
                .map(|_| (0..cfg.heads).map(|_| make()).collect())
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<F>> {
        self.matrices.iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor<F>> {
        self.matrices.iter_mut().flatten()
    }

    pub fn get(&self, layer: usize, head: usize) -> &Tensor<F> {
        &self.matrices[layer][head]
    }

    pub fn get_mut(&mut self, layer: usize, head: usize) -> &mut Tensor<F> {
        &mut self.matrices[layer][head]
    }
}

/// Learnable prompt tokens, `prompt_len` per layer, prepended to that
/// layer's tokens and dropped after the block.
#[derive(Clone, Debug, PartialEq)]
pub struct PlainPrompts<F: Real> {
    /// `prompts[layer][token]` has shape `[d]`.
    pub prompts: Vec<Vec<Tensor<F>>>,
}

impl<F: Real> PlainPrompts<F> {
    pub fn init(cfg: &VitConfig) -> Result<Self> {
        if cfg.prompt_len == 0 {
            return Err(Error::Config("plain-prompt mode needs prompt_len >= 1".into()));
        }
        let mut rng = RngStream::new(cfg.init_seed).derive(StreamPurpose::Init, 1);
        Ok(PlainPrompts {
            prompts: (0..cfg.depth)
                .map(|_| {
                    (0..cfg.prompt_len)
                        .map(|_| rng.gaussian_tensor(&[cfg.dim], 0.02))
                        .collect()
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.prompts.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Tag of an [`Adapter`] without its parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterKind {
    Frozen,
    #[default]
    Cp,
    Prompts,
}

impl AdapterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterKind::Frozen => "frozen",
            AdapterKind::Cp => "cp",
            AdapterKind::Prompts => "prompts",
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What the trainable part of the model is.
#[derive(Clone, Debug, PartialEq)]
pub enum Adapter<F: Real> {
    /// Backbone only; nothing trainable.
    Frozen,
    Cp(CoalescentProjection<F>),
    Prompts(PlainPrompts<F>),
}

impl<F: Real> Adapter<F> {
    pub fn kind(&self) -> AdapterKind {
        match self {
            Adapter::Frozen => AdapterKind::Frozen,
            Adapter::Cp(_) => AdapterKind::Cp,
            Adapter::Prompts(_) => AdapterKind::Prompts,
        }
    }

    /// Freshly initialized adapter of the given kind.
    pub fn init(kind: AdapterKind, cfg: &VitConfig) -> Result<Self> {
        Ok(match kind {
            AdapterKind::Frozen => Adapter::Frozen,
            AdapterKind::Cp => Adapter::Cp(CoalescentProjection::init(cfg)),
            AdapterKind::Prompts => Adapter::Prompts(PlainPrompts::init(cfg)?),
        })
    }

    /// Flat parameter list, layer-major: `L * h` CP matrices or
    /// `L * prompt_len` prompt vectors.
    pub fn params(&self) -> Vec<&Tensor<F>> {
        match self {
            Adapter::Frozen => Vec::new(),
            Adapter::Cp(cp) => cp.iter().collect(),
            Adapter::Prompts(p) => p.prompts.iter().flatten().collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        match self {
            Adapter::Frozen => Vec::new(),
            Adapter::Cp(cp) => cp.iter_mut().collect(),
            Adapter::Prompts(p) => p.prompts.iter_mut().flatten().collect(),
        }
    }
}
