use super::{
    Adapter, AdapterKind, BackboneParams, BlockParams, CoalescentProjection, CpVariant, PlainPrompts, VitConfig,
};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Final normalized CLS embeddings, `[batch, d]`.
    pub cls: Var,
    /// Leaves for the adapter parameters, in [`Adapter::params`] order.
    pub params: Vec<Var>,
    /// Attention probabilities of every block, `[h * batch, T, T]`.
    pub attention: Vec<Var>,
}

/// Vision transformer with a frozen backbone and an optional adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct VitModel<F: Real> {
    pub cfg: VitConfig,
    pub backbone: BackboneParams<F>,
    pub adapter: Adapter<F>,
}

/// Cut `[C, H, W]` images into row-major flattened `P x P` patches.
/// Rows are ordered by image, then patch row, then patch column; each row is
/// laid out channel-major like a convolution kernel.
pub fn patchify<F: Real>(images: &[&Tensor<F>], cfg: &VitConfig) -> Result<Tensor<F>> {
    let (c, h, w, p) = (cfg.channels, cfg.image_height, cfg.image_width, cfg.patch);
    let expected = [c, h, w];
    if images.is_empty() {
        return Err(Error::Contract("empty image batch".into()));
    }
    let mut out = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.shape() != expected {
            return Err(Error::Config(format!(
                "image shape {:?} does not match configured geometry {expected:?}",
                img.shape()
            )));
        }
        let data = img.data();
        for py in 0..h / p {
            for px in 0..w / p {
                for ch in 0..c {
                    for y in 0..p {
                        let row = (ch * h + py * p + y) * w + px * p;
                        out.extend_from_slice(&data[row..row + p]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(
        vec![images.len() * cfg.num_patches(), cfg.patch_len()],
        out,
    ))
}

/// Per-block constant leaves.
struct BlockVars {
    ln1: (Var, Var),
    wq: (Var, Var),
    wk: (Var, Var),
    wv: (Var, Var),
    wo: (Var, Var),
    ln2: (Var, Var),
    w1: (Var, Var),
    w2: (Var, Var),
}

impl BlockVars {
    fn new<F: Real>(g: &mut Graph<F>, b: &BlockParams<F>) -> Self {
        let mut c = |t: &Tensor<F>| g.constant(t.clone());
        BlockVars {
            ln1: (c(&b.ln1_gamma), c(&b.ln1_beta)),
            wq: (c(&b.wq), c(&b.bq)),
            wk: (c(&b.wk), c(&b.bk)),
            wv: (c(&b.wv), c(&b.bv)),
            wo: (c(&b.wo), c(&b.bo)),
            ln2: (c(&b.ln2_gamma), c(&b.ln2_beta)),
            w1: (c(&b.w1), c(&b.b1)),
            w2: (c(&b.w2), c(&b.b2)),
        }
    }
}

/// Adapter state for one block as graph leaves.
enum LayerAdapter {
    None,
    /// Stacked `[h, d_h, d_h]` projection.
    Cp(CpVariant, Var),
    /// `[p, d]` prompt tokens.
    Prompts(Var),
}

fn linear<F: Real>(g: &mut Graph<F>, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

impl<F: Real> VitModel<F> {
    pub fn new(cfg: VitConfig, adapter: Adapter<F>) -> Result<Self> {
        let backbone = BackboneParams::init(&cfg)?;
        Ok(VitModel { cfg, backbone, adapter })
    }

    /// CP model at its initial (baseline-equivalent) state.
    pub fn with_cp(cfg: VitConfig) -> Result<Self> {
        let cp = CoalescentProjection::init(&cfg);
        Self::new(cfg, Adapter::Cp(cp))
    }

    pub fn with_prompts(cfg: VitConfig) -> Result<Self> {
        let prompts = PlainPrompts::init(&cfg)?;
        Self::new(cfg, Adapter::Prompts(prompts))
    }

    pub fn frozen(cfg: VitConfig) -> Result<Self> {
        Self::new(cfg, Adapter::Frozen)
    }

    pub fn with_kind(cfg: VitConfig, kind: AdapterKind) -> Result<Self> {
        let adapter = Adapter::init(kind, &cfg)?;
        Self::new(cfg, adapter)
    }

    pub fn trainable_params(&self) -> Vec<&Tensor<F>> {
        self.adapter.params()
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        self.adapter.params_mut()
    }

    pub fn trainable_scalar_count(&self) -> usize {
        self.trainable_params().iter().map(|t| t.numel()).sum()
    }

    /// Token matrix `[batch * A, d]`: patch projection, CLS prepended,
    /// position embeddings added.
    pub fn patch_embed(&self, g: &mut Graph<F>, images: &[&Tensor<F>]) -> Result<Var> {
        let cfg = &self.cfg;
        let (batch, tokens, d) = (images.len(), cfg.tokens(), cfg.dim);
        let patches = g.constant(patchify(images, cfg)?);
        let w = g.constant(self.backbone.patch_weight.clone());
        let b = g.constant(self.backbone.patch_bias.clone());
        g.set_scope("patch-embed");
        let x = linear(g, patches, (w, b))?;
        let x = g.reshape(x, &[batch, tokens - 1, d])?;
        let cls = g.constant(self.backbone.cls_token.clone());
        let cls = g.repeat_leading(cls, batch)?;
        let x = g.concat(&[cls, x], 1)?;
        let x = g.reshape(x, &[batch, tokens * d])?;
        let pos = g.constant(self.backbone.pos_embed.reshape(&[tokens * d])?);
        let x = g.add_row(x, pos)?;
        g.reshape(x, &[batch * tokens, d])
    }

    /// CLS embeddings with the model's adapter. `track_grad` makes the
    /// adapter parameters differentiable leaves.
    pub fn forward_cls(&self, g: &mut Graph<F>, images: &[&Tensor<F>], track_grad: bool) -> Result<Forward> {
        self.forward_with(g, images, &self.adapter, track_grad)
    }

    /// CLS embeddings of the frozen backbone alone, ignoring the adapter.
    pub fn forward_backbone(&self, g: &mut Graph<F>, images: &[&Tensor<F>]) -> Result<Forward> {
        self.forward_with(g, images, &Adapter::Frozen, false)
    }

    /// Forward of the plain-prompt baseline; errors unless the adapter holds prompts.
    pub fn plain_prompt_forward(&self, g: &mut Graph<F>, images: &[&Tensor<F>], track_grad: bool) -> Result<Forward> {
        match &self.adapter {
            Adapter::Prompts(p) if !p.is_empty() => self.forward_with(g, images, &self.adapter, track_grad),
            _ => Err(Error::Config(
                "plain_prompt_forward needs a model with prompt_len >= 1 prompts".into(),
            )),
        }
    }

    /// Embeddings as a plain tensor, without gradient tracking.
    pub fn embed(&self, images: &[&Tensor<F>]) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let fwd = self.forward_cls(&mut g, images, false)?;
        Ok(g.value(fwd.cls).clone())
    }

    fn forward_with(
        &self,
        g: &mut Graph<F>,
        images: &[&Tensor<F>],
        adapter: &Adapter<F>,
        track_grad: bool,
    ) -> Result<Forward> {
        let cfg = &self.cfg;
        let (batch, d, dh) = (images.len(), cfg.dim, cfg.head_dim());
        let mut params = Vec::new();
        let mut layer_adapters = Vec::with_capacity(cfg.depth);
        match adapter {
            Adapter::Frozen => layer_adapters.extend((0..cfg.depth).map(|_| LayerAdapter::None)),
            Adapter::Cp(cp) => {
                if cp.matrices.len() != cfg.depth || cp.iter().any(|m| m.shape() != [dh, dh]) {
                    return Err(Error::Config(format!(
                        "coalescent projection does not match {} layers of {}x{} head matrices",
                        cfg.depth, dh, dh
                    )));
                }
                for layer in &cp.matrices {
                    let mut heads = Vec::with_capacity(layer.len());
                    for m in layer {
                        let v = g.leaf(m.clone(), track_grad);
                        params.push(v);
                        heads.push(g.reshape(v, &[1, dh, dh])?);
                    }
                    let stacked = g.concat(&heads, 0)?;
                    layer_adapters.push(LayerAdapter::Cp(cp.variant, stacked));
                }
            }
            Adapter::Prompts(p) => {
                if p.prompts.len() != cfg.depth {
                    return Err(Error::Config("prompt layers do not match depth".into()));
                }
                for layer in &p.prompts {
                    let mut rows = Vec::with_capacity(layer.len());
                    for t in layer {
                        let v = g.leaf(t.clone(), track_grad);
                        params.push(v);
                        rows.push(g.reshape(v, &[1, d])?);
                    }
                    let stacked = g.concat(&rows, 0)?;
                    layer_adapters.push(LayerAdapter::Prompts(stacked));
                }
            }
        }

        let tokens = cfg.tokens();
        let mut x = self.patch_embed(g, images)?;
        let mut attention = Vec::with_capacity(cfg.depth);
        for (block, la) in self.backbone.blocks.iter().zip(&layer_adapters) {
            let vars = BlockVars::new(g, block);
            x = match la {
                LayerAdapter::Prompts(prompts) => {
                    let plen = g.shape(*prompts)[0];
                    let x3 = g.reshape(x, &[batch, tokens, d])?;
                    let p3 = g.repeat_leading(*prompts, batch)?;
                    let joined = g.concat(&[p3, x3], 1)?;
                    let seq = plen + tokens;
                    let flat = g.reshape(joined, &[batch * seq, d])?;
                    let (y, att) = self.block(g, flat, &vars, None, batch, seq)?;
                    attention.push(att);
                    let y3 = g.reshape(y, &[batch, seq, d])?;
                    let kept = g.narrow(y3, 1, plen, tokens)?;
                    g.reshape(kept, &[batch * tokens, d])?
                }
                LayerAdapter::Cp(variant, m) => {
                    let (y, att) = self.block(g, x, &vars, Some((*variant, *m)), batch, tokens)?;
                    attention.push(att);
                    y
                }
                LayerAdapter::None => {
                    let (y, att) = self.block(g, x, &vars, None, batch, tokens)?;
                    attention.push(att);
                    y
                }
            };
        }
        let x3 = g.reshape(x, &[batch, tokens, d])?;
        let cls = g.narrow(x3, 1, 0, 1)?;
        let cls = g.reshape(cls, &[batch, d])?;
        let gamma = g.constant(self.backbone.final_gamma.clone());
        let beta = g.constant(self.backbone.final_beta.clone());
        let cls = g.layer_norm(cls, gamma, beta)?;
        Ok(Forward { cls, params, attention })
    }

    /// `[batch * seq, d] -> [h * batch, seq, d_h]`, head-major.
    fn split_heads(&self, g: &mut Graph<F>, x: Var, batch: usize, seq: usize) -> Result<Var> {
        let (h, dh) = (self.cfg.heads, self.cfg.head_dim());
        let x = g.reshape(x, &[batch, seq, h, dh])?;
        let x = g.permute(x, &[2, 0, 1, 3])?;
        g.reshape(x, &[h * batch, seq, dh])
    }

    fn merge_heads(&self, g: &mut Graph<F>, x: Var, batch: usize, seq: usize) -> Result<Var> {
        let (h, dh) = (self.cfg.heads, self.cfg.head_dim());
        let x = g.reshape(x, &[h, batch, seq, dh])?;
        let x = g.permute(x, &[1, 2, 0, 3])?;
        g.reshape(x, &[batch * seq, h * dh])
    }

    /// Right-multiply every head slice by that head's projection:
    /// `[h * batch, seq, d_h] x [h, d_h, d_h]`.
    fn project_heads(&self, g: &mut Graph<F>, x: Var, m: Var, batch: usize, seq: usize) -> Result<Var> {
        let (h, dh) = (self.cfg.heads, self.cfg.head_dim());
        let flat = g.reshape(x, &[h, batch * seq, dh])?;
        let y = g.bmm(flat, m)?;
        g.reshape(y, &[h * batch, seq, dh])
    }

    /// Multi-head attention with an optional coalescent projection. Returns
    /// the attention output `[batch * seq, d]` (before the residual) and the
    /// attention probabilities.
    fn attention(
        &self,
        g: &mut Graph<F>,
        xn: Var,
        vars: &BlockVars,
        cp: Option<(CpVariant, Var)>,
        batch: usize,
        seq: usize,
    ) -> Result<(Var, Var)> {
        let cfg = &self.cfg;
        if cfg.dim != cfg.heads * cfg.head_dim() {
            return Err(Error::Config("head dimension mismatch".into()));
        }
        g.set_scope("qkv");
        let q = linear(g, xn, vars.wq)?;
        let k = linear(g, xn, vars.wk)?;
        let v = linear(g, xn, vars.wv)?;
        let (qh, kh, vh) = (
            self.split_heads(g, q, batch, seq)?,
            self.split_heads(g, k, batch, seq)?,
            self.split_heads(g, v, batch, seq)?,
        );
        let scores = match cp {
            None => {
                g.set_scope("attention-scores");
                g.bmm_nt(qh, kh)?
            }
            Some((CpVariant::AdditiveBilinear, m)) => {
                g.set_scope("attention-scores");
                let base = g.bmm_nt(qh, kh)?;
                let xh = self.split_heads(g, xn, batch, seq)?;
                g.set_scope("cp-projection");
                let xm = self.project_heads(g, xh, m, batch, seq)?;
                g.set_scope("cp-term");
                let extra = g.bmm_nt(xm, xh)?;
                g.add(base, extra)?
            }
            Some((CpVariant::QkBilinear, m)) => {
                g.set_scope("cp-projection");
                let qm = self.project_heads(g, qh, m, batch, seq)?;
                g.set_scope("attention-scores");
                g.bmm_nt(qm, kh)?
            }
        };
        let scaled = g.scale(scores, F::from_f64(1.0 / (cfg.head_dim() as f64).sqrt()));
        let att = g.softmax_last(scaled);
        g.set_scope("value-mix");
        let ctx = g.bmm(att, vh)?;
        let ctx = self.merge_heads(g, ctx, batch, seq)?;
        g.set_scope("out-proj");
        let out = linear(g, ctx, vars.wo)?;
        Ok((out, att))
    }

    fn block(
        &self,
        g: &mut Graph<F>,
        x: Var,
        vars: &BlockVars,
        cp: Option<(CpVariant, Var)>,
        batch: usize,
        seq: usize,
    ) -> Result<(Var, Var)> {
        g.record_seq_len(seq);
        let xn = g.layer_norm(x, vars.ln1.0, vars.ln1.1)?;
        let (att_out, att) = self.attention(g, xn, vars, cp, batch, seq)?;
        let x = g.add(x, att_out)?;
        let xn = g.layer_norm(x, vars.ln2.0, vars.ln2.1)?;
        g.set_scope("mlp");
        let hidden = linear(g, xn, vars.w1)?;
        let hidden = g.gelu(hidden);
        let out = linear(g, hidden, vars.w2)?;
        g.set_scope("other");
        Ok((g.add(x, out)?, att))
    }
}
