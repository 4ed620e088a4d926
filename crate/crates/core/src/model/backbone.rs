use super::VitConfig;
use crate::error::{Error, Result};
use crate::tensor::{Real, RngStream, StreamPurpose, Tensor};

/// Weights of one transformer block. Linear weights are stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<F: Real> {
    pub ln1_gamma: Tensor<F>,
    pub ln1_beta: Tensor<F>,
    pub wq: Tensor<F>,
    pub bq: Tensor<F>,
    pub wk: Tensor<F>,
    pub bk: Tensor<F>,
    pub wv: Tensor<F>,
    pub bv: Tensor<F>,
    pub wo: Tensor<F>,
    pub bo: Tensor<F>,
    pub ln2_gamma: Tensor<F>,
    pub ln2_beta: Tensor<F>,
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
}

/// Frozen weights of the vision transformer. Never receives gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<F: Real> {
    pub patch_weight: Tensor<F>,
    pub patch_bias: Tensor<F>,
    pub cls_token: Tensor<F>,
    pub pos_embed: Tensor<F>,
    pub blocks: Vec<BlockParams<F>>,
    pub final_gamma: Tensor<F>,
    pub final_beta: Tensor<F>,
}

fn linear<F: Real>(rng: &mut RngStream, fan_in: usize, fan_out: usize) -> Tensor<F> {
    rng.gaussian_tensor(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt())
}

impl<F: Real> BackboneParams<F> {
    /// Seeded random initialization (`cfg.init_seed`).
    pub fn init(cfg: &VitConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngStream::new(cfg.init_seed).derive(StreamPurpose::Init, 0);
        let d = cfg.dim;
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams {
                ln1_gamma: Tensor::ones(&[d]),
                ln1_beta: Tensor::zeros(&[d]),
                wq: linear(&mut rng, d, d),
                bq: Tensor::zeros(&[d]),
                wk: linear(&mut rng, d, d),
                bk: Tensor::zeros(&[d]),
                wv: linear(&mut rng, d, d),
                bv: Tensor::zeros(&[d]),
                wo: linear(&mut rng, d, d),
                bo: Tensor::zeros(&[d]),
                ln2_gamma: Tensor::ones(&[d]),
                ln2_beta: Tensor::zeros(&[d]),
                w1: linear(&mut rng, d, cfg.mlp_dim),
                b1: Tensor::zeros(&[cfg.mlp_dim]),
                w2: linear(&mut rng, cfg.mlp_dim, d),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(BackboneParams {
            patch_weight: linear(&mut rng, cfg.patch_len(), d),
            patch_bias: Tensor::zeros(&[d]),
            cls_token: rng.gaussian_tensor(&[1, d], 1.0),
            pos_embed: rng.gaussian_tensor(&[cfg.tokens(), d], 0.1),
            blocks,
            final_gamma: Tensor::ones(&[d]),
            final_beta: Tensor::zeros(&[d]),
        })
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![
            ("patch_weight".to_string(), &self.patch_weight),
            ("patch_bias".to_string(), &self.patch_bias),
            ("cls_token".to_string(), &self.cls_token),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.fields() {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("final_gamma".to_string(), &self.final_gamma));
        out.push(("final_beta".to_string(), &self.final_beta));
        out
    }

    /// Rebuild from named tensors, checking every shape against `cfg`.
    pub fn from_named(cfg: &VitConfig, mut take: impl FnMut(&str) -> Result<Tensor<F>>) -> Result<Self> {
        let template = BackboneParams::<F>::shapes(cfg);
        let mut get = |name: &str| -> Result<Tensor<F>> {
            let t = take(name)?;
            let expected = &template[name];
            if t.shape() != expected.as_slice() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, config expects {expected:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let mut f = |n: &str| get(&format!("blocks.{i}.{n}"));
            blocks.push(BlockParams {
                ln1_gamma: f("ln1_gamma")?,
                ln1_beta: f("ln1_beta")?,
                wq: f("wq")?,
                bq: f("bq")?,
                wk: f("wk")?,
                bk: f("bk")?,
                wv: f("wv")?,
                bv: f("bv")?,
                wo: f("wo")?,
                bo: f("bo")?,
                ln2_gamma: f("ln2_gamma")?,
                ln2_beta: f("ln2_beta")?,
                w1: f("w1")?,
                b1: f("b1")?,
                w2: f("w2")?,
                b2: f("b2")?,
            });
        }
        Ok(BackboneParams {
            patch_weight: get("patch_weight")?,
            patch_bias: get("patch_bias")?,
            cls_token: get("cls_token")?,
            pos_embed: get("pos_embed")?,
            blocks,
            final_gamma: get("final_gamma")?,
            final_beta: get("final_beta")?,
        })
    }

    fn shapes(cfg: &VitConfig) -> std::collections::HashMap<String, Vec<usize>> {
        let (d, m) = (cfg.dim, cfg.mlp_dim);
        let mut s = std::collections::HashMap::new();
        s.insert("patch_weight".into(), vec![cfg.patch_len(), d]);
        s.insert("patch_bias".into(), vec![d]);
        s.insert("cls_token".into(), vec![1, d]);
        s.insert("pos_embed".into(), vec![cfg.tokens(), d]);
        s.insert("final_gamma".into(), vec![d]);
        s.insert("final_beta".into(), vec![d]);
        for i in 0..cfg.depth {
            let block: [(&str, Vec<usize>); 16] = [
                ("ln1_gamma", vec![d]),
                ("ln1_beta", vec![d]),
                ("wq", vec![d, d]),
                ("bq", vec![d]),
                ("wk", vec![d, d]),
                ("bk", vec![d]),
                ("wv", vec![d, d]),
                ("bv", vec![d]),
                ("wo", vec![d, d]),
                ("bo", vec![d]),
                ("ln2_gamma", vec![d]),
                ("ln2_beta", vec![d]),
                ("w1", vec![d, m]),
                ("b1", vec![m]),
                ("w2", vec![m, d]),
                ("b2", vec![d]),
            ];
            for (n, shape) in block {
                s.insert(format!("blocks.{i}.{n}"), shape);
            }
        }
        s
    }
}

impl<F: Real> BlockParams<F> {
    fn fields(&self) -> [(&'static str, &Tensor<F>); 16] {
        [
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }
}
