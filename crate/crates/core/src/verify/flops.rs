use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdapterKind, CpVariant, VitConfig, VitModel};
use crate::tensor::{Graph, RngStream, StreamPurpose, Tensor};

/// Matmul multiply-accumulates of one transformer block, by component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentMacs {
    pub qkv: u64,
    pub attention_scores: u64,
    /// Head-slice products with the CP matrices.
    pub cp_projection: u64,
    /// The extra `A x A` product of the additive variant.
    pub cp_term: u64,
    pub value_mix: u64,
    pub out_proj: u64,
    pub mlp: u64,
}

impl ComponentMacs {
    pub fn total(&self) -> u64 {
        self.qkv + self.attention_scores + self.cp_projection + self.cp_term + self.value_mix + self.out_proj + self.mlp
    }

    /// Work spent forming attention logits.
    pub fn score_product(&self) -> u64 {
        self.attention_scores + self.cp_term
    }

    /// Every component multiplied by `k`, e.g. the depth.
    pub fn scaled(&self, k: u64) -> Self {
        ComponentMacs {
            qkv: self.qkv * k,
            attention_scores: self.attention_scores * k,
            cp_projection: self.cp_projection * k,
            cp_term: self.cp_term * k,
            value_mix: self.value_mix * k,
            out_proj: self.out_proj * k,
            mlp: self.mlp * k,
        }
    }

    fn diff_names(&self, other: &Self) -> Vec<String> {
        let pairs = [
            ("qkv", self.qkv, other.qkv),
            ("attention-scores", self.attention_scores, other.attention_scores),
            ("cp-projection", self.cp_projection, other.cp_projection),
            ("cp-term", self.cp_term, other.cp_term),
            ("value-mix", self.value_mix, other.value_mix),
            ("out-proj", self.out_proj, other.out_proj),
            ("mlp", self.mlp, other.mlp),
        ];
        pairs
            .iter()
            .filter(|(_, a, b)| a != b)
            .map(|(n, a, b)| format!("{n}: symbolic {a} vs instrumented {b}"))
            .collect()
    }
}

/// Model-level MACs grouped by the monomial they scale with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityTerms {
    /// `d A^2` work: score products and value mixing.
    pub token_quadratic: u64,
    /// `A d^2` work: qkv, output projection and CP head projections.
    pub token_linear: u64,
    /// MLP work, `L_mlp A d d_mlp` per block with `L_mlp = 2`.
    pub mlp: u64,
}

impl ComplexityTerms {
    pub fn total(&self) -> u64 {
        self.token_quadratic + self.token_linear + self.mlp
    }
}

/// Operation counts of one forward pass over a single image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub record: String,
    pub adapter: AdapterKind,
    pub cp_variant: CpVariant,
    /// `A = HW / P^2 + 1`.
    pub tokens: usize,
    /// Tokens processed by each block.
    pub seq_len: usize,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub per_block: ComponentMacs,
    pub block_total: u64,
    pub patch_embed: u64,
    /// Blocks plus patch embedding.
    pub model_total: u64,
    pub terms: ComplexityTerms,
    /// Per-component counts summed over all blocks of an instrumented forward.
    pub instrumented: ComponentMacs,
    pub instrumented_patch_embed: u64,
    /// Sequence length seen by each block of the instrumented forward.
    pub seq_lens: Vec<usize>,
    pub trainable_params: usize,
    pub formula: String,
}

impl FlopReport {
    pub fn to_json_line(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }
}

fn seq_len(cfg: &VitConfig, kind: AdapterKind) -> usize {
    match kind {
        AdapterKind::Prompts => cfg.tokens() + cfg.prompt_len,
        _ => cfg.tokens(),
    }
}

/// Per-block counts from the dimensions alone.
pub fn symbolic_block_macs(cfg: &VitConfig, kind: AdapterKind) -> ComponentMacs {
    let t = seq_len(cfg, kind) as u64;
    let (d, dh, m) = (cfg.dim as u64, cfg.head_dim() as u64, cfg.mlp_dim as u64);
    let cp = kind == AdapterKind::Cp;
    ComponentMacs {
        qkv: 3 * t * d * d,
        attention_scores: t * t * d,
        cp_projection: if cp { t * d * dh } else { 0 },
        cp_term: if cp && cfg.cp_variant == CpVariant::AdditiveBilinear {
            t * t * d
        } else {
            0
        },
        value_mix: t * t * d,
        out_proj: t * d * d,
        mlp: 2 * t * d * m,
    }
}

pub fn symbolic_patch_macs(cfg: &VitConfig) -> u64 {
    (cfg.num_patches() * cfg.patch_len() * cfg.dim) as u64
}

fn formula(cfg: &VitConfig, kind: AdapterKind) -> String {
    let t = if kind == AdapterKind::Prompts {
        format!("(A+{})", cfg.prompt_len)
    } else {
        "A".to_string()
    };
    let score = match (kind, cfg.cp_variant) {
        (AdapterKind::Cp, CpVariant::AdditiveBilinear) => "2",
        _ => "1",
    };
    let proj = if kind == AdapterKind::Cp { " + T d d_h" } else { "" };
    format!(
        "L [ {score} d T^2 + d T^2 + 4 T d^2{proj} + 2 T d d_mlp ] + (A-1) C P^2 d, T = {t}, \
         L = {}, A = {}, d = {}, h = {}, d_h = {}, d_mlp = {}, C = {}, P = {}",
        cfg.depth,
        cfg.tokens(),
        cfg.dim,
        cfg.heads,
        cfg.head_dim(),
        cfg.mlp_dim,
        cfg.channels,
        cfg.patch
    )
}

struct Measured {
    macs: ComponentMacs,
    patch_embed: u64,
    seq_lens: Vec<usize>,
    trainable: usize,
}

fn measure(cfg: &VitConfig, kind: AdapterKind) -> Result<Measured> {
    let model = VitModel::<f32>::with_kind(cfg.clone(), kind)?;
    let image: Tensor<f32> = RngStream::new(cfg.init_seed)
        .derive(StreamPurpose::Verify, 0)
        .gaussian_tensor(&[cfg.channels, cfg.image_height, cfg.image_width], 1.0);
    let mut g = Graph::instrumented();
    model.forward_cls(&mut g, &[&image], false)?;
    let instr = g
        .instrument()
        .ok_or_else(|| Error::Verification("graph lost its instrumentation".into()))?;
    let mut macs = ComponentMacs::default();
    let mut patch_embed = 0;
    for (scope, &n) in &instr.macs {
        let slot = match scope.as_str() {
            "qkv" => &mut macs.qkv,
            "attention-scores" => &mut macs.attention_scores,
            "cp-projection" => &mut macs.cp_projection,
            "cp-term" => &mut macs.cp_term,
            "value-mix" => &mut macs.value_mix,
            "out-proj" => &mut macs.out_proj,
            "mlp" => &mut macs.mlp,
            "patch-embed" => &mut patch_embed,
            other => {
                return Err(Error::Verification(format!(
                    "{n} multiply-accumulates recorded under unexpected scope `{other}`"
                )))
            }
        };
        *slot += n;
    }
    Ok(Measured {
        macs,
        patch_embed,
        seq_lens: instr.seq_lens.clone(),
        trainable: model.trainable_scalar_count(),
    })
}

/// Count matmul multiply-accumulates of a single-image forward two ways,
/// from the dimensions and by instrumenting an actual forward, and fail
/// unless they agree exactly.
pub fn flop_count(cfg: &VitConfig, kind: AdapterKind) -> Result<FlopReport> {
    cfg.validate()?;
    let per_block = symbolic_block_macs(cfg, kind);
    let layers = cfg.depth as u64;
    let expected = per_block.scaled(layers);
    let patch_embed = symbolic_patch_macs(cfg);
    let measured = measure(cfg, kind)?;

    let mut problems = expected.diff_names(&measured.macs);
    if measured.patch_embed != patch_embed {
        problems.push(format!(
            "patch-embed: symbolic {patch_embed} vs instrumented {}",
            measured.patch_embed
        ));
    }
    let t = seq_len(cfg, kind);
    if measured.seq_lens.len() != cfg.depth || measured.seq_lens.iter().any(|&s| s != t) {
        problems.push(format!(
            "sequence lengths {:?}, expected {t} in each of {} blocks",
            measured.seq_lens, cfg.depth
        ));
    }
    if !problems.is_empty() {
        return Err(Error::Verification(format!(
            "instrumented counts disagree with the symbolic model ({kind}): {}",
            problems.join("; ")
        )));
    }

    let block_total = per_block.total();
    let terms = ComplexityTerms {
        token_quadratic: layers * (per_block.attention_scores + per_block.cp_term + per_block.value_mix),
        token_linear: layers * (per_block.qkv + per_block.out_proj + per_block.cp_projection),
        mlp: layers * per_block.mlp,
    };
    Ok(FlopReport {
        record: "flop_report".into(),
        adapter: kind,
        cp_variant: cfg.cp_variant,
        tokens: cfg.tokens(),
        seq_len: t,
        layers: cfg.depth,
        dim: cfg.dim,
        heads: cfg.heads,
        mlp_dim: cfg.mlp_dim,
        per_block,
        block_total,
        patch_embed,
        model_total: layers * block_total + patch_embed,
        terms,
        instrumented: measured.macs,
        instrumented_patch_embed: measured.patch_embed,
        seq_lens: measured.seq_lens,
        trainable_params: measured.trainable,
        formula: formula(cfg, kind),
    })
}
