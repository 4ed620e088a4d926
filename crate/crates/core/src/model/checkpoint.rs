//! Checkpoint files.
//!
//! A checkpoint starts with a UTF-8 text header and continues with binary
//! tensor records:
//!
//! ```text
//! cplsr-checkpoint v1
//! precision = f64
//! adapter = cp            # cp | prompts | frozen
//! image_height = 32
//! ...                     # every VitConfig field as `key = value`
//! tensors = 120
//! <empty line>
//! ```
//!
//! Each record is a little-endian `u32` name length, the name bytes, then one
//! tensor in the binary layout of [`crate::tensor::io`]. Backbone tensors come
//! first, followed by `cp.{layer}.{head}` or `prompt.{layer}.{token}`.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, Read};
use std::path::Path;

use super::{Adapter, BackboneParams, CoalescentProjection, CpVariant, PlainPrompts, VitConfig, VitModel};
use crate::error::{Error, Result};
use crate::tensor::io::{read_tensor, write_tensor};
use crate::tensor::{Real, Tensor};

const MAGIC_LINE: &str = "cplsr-checkpoint v1";

fn config_lines(cfg: &VitConfig) -> Vec<(&'static str, String)> {
    vec![
        ("image_height", cfg.image_height.to_string()),
        ("image_width", cfg.image_width.to_string()),
        ("channels", cfg.channels.to_string()),
        ("patch", cfg.patch.to_string()),
        ("dim", cfg.dim.to_string()),
        ("heads", cfg.heads.to_string()),
        ("depth", cfg.depth.to_string()),
        ("mlp_dim", cfg.mlp_dim.to_string()),
        ("cp_variant", cfg.cp_variant.as_str().to_string()),
        ("prompt_len", cfg.prompt_len.to_string()),
        ("init_seed", cfg.init_seed.to_string()),
    ]
}

fn adapter_tensors<F: Real>(adapter: &Adapter<F>) -> Vec<(String, &Tensor<F>)> {
    match adapter {
        Adapter::Frozen => Vec::new(),
        Adapter::Cp(cp) => cp
            .matrices
            .iter()
            .enumerate()
            .flat_map(|(l, heads)| heads.iter().enumerate().map(move |(h, t)| (format!("cp.{l}.{h}"), t)))
            .collect(),
        Adapter::Prompts(p) => p
            .prompts
            .iter()
            .enumerate()
            .flat_map(|(l, toks)| {
                toks.iter()
                    .enumerate()
                    .map(move |(i, t)| (format!("prompt.{l}.{i}"), t))
            })
            .collect(),
    }
}

pub fn to_bytes<F: Real>(model: &VitModel<F>) -> Vec<u8> {
    let mut tensors = model.backbone.named();
    tensors.extend(adapter_tensors(&model.adapter));
    let mut header = format!(
        "{MAGIC_LINE}\nprecision = {}\nadapter = {}\n",
        F::PRECISION.as_str(),
        model.adapter.kind()
    );
    for (k, v) in config_lines(&model.cfg) {
        header.push_str(&format!("{k} = {v}\n"));
    }
    header.push_str(&format!("tensors = {}\n\n", tensors.len()));
    let mut out = header.into_bytes();
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    }
    out
}

fn parse_num<T: std::str::FromStr>(fields: &HashMap<String, String>, key: &str) -> Result<T> {
    let raw = fields
        .get(key)
        .ok_or_else(|| Error::Format(format!("checkpoint header is missing `{key}`")))?;
    raw.parse()
        .map_err(|_| Error::Format(format!("checkpoint header `{key}` has invalid value `{raw}`")))
}

pub fn from_bytes<F: Real>(bytes: &[u8]) -> Result<VitModel<F>> {
    let mut reader = bytes;
    let mut fields = HashMap::new();
    let mut first = true;
    loop {
        let mut line = String::new();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if n == 0 {
            return Err(Error::Format("checkpoint header is not terminated".into()));
        }
        let line = line.trim_end_matches('\n');
        if first {
            if line != MAGIC_LINE {
                return Err(Error::Format("not a cplsr checkpoint".into()));
            }
            first = false;
            continue;
        }
        if line.is_empty() {
            break;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::Format(format!("malformed checkpoint header line `{line}`")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let precision: String = parse_num(&fields, "precision")?;
    if precision != F::PRECISION.as_str() {
        return Err(Error::Format(format!(
            "checkpoint precision {precision} differs from requested {}",
            F::PRECISION.as_str()
        )));
    }
    let cp_variant: String = parse_num(&fields, "cp_variant")?;
    let cfg = VitConfig {
        image_height: parse_num(&fields, "image_height")?,
        image_width: parse_num(&fields, "image_width")?,
        channels: parse_num(&fields, "channels")?,
        patch: parse_num(&fields, "patch")?,
        dim: parse_num(&fields, "dim")?,
        heads: parse_num(&fields, "heads")?,
        depth: parse_num(&fields, "depth")?,
        mlp_dim: parse_num(&fields, "mlp_dim")?,
        cp_variant: CpVariant::parse(&cp_variant).map_err(|e| Error::Format(e.to_string()))?,
        prompt_len: parse_num(&fields, "prompt_len")?,
        init_seed: parse_num(&fields, "init_seed")?,
    };
    cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
    let count: usize = parse_num(&fields, "tensors")?;

    let mut tensors = HashMap::with_capacity(count);
    for _ in 0..count {
        let mut len = [0u8; 4];
        reader
            .read_exact(&mut len)
            .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        reader
            .read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let t: Tensor<F> = read_tensor(&mut reader)?;
        tensors.insert(name, t);
    }
    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor `{name}`")))
    };
    let backbone = BackboneParams::from_named(&cfg, &mut take)?;
    let (dh, d) = (cfg.head_dim(), cfg.dim);
    let mut check = |name: String, shape: &[usize]| -> Result<Tensor<F>> {
        let t = take(&name)?;
        if t.shape() != shape {
            return Err(Error::Format(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    let adapter_kind: String = parse_num(&fields, "adapter")?;
    let adapter = match adapter_kind.as_str() {
        "frozen" => Adapter::Frozen,
        "cp" => {
            let mut matrices = Vec::with_capacity(cfg.depth);
            for l in 0..cfg.depth {
                let heads = (0..cfg.heads)
                    .map(|h| check(format!("cp.{l}.{h}"), &[dh, dh]))
                    .collect::<Result<Vec<_>>>()?;
                matrices.push(heads);
            }
            Adapter::Cp(CoalescentProjection {
                variant: cfg.cp_variant,
                matrices,
            })
        }
        "prompts" => {
            let mut prompts = Vec::with_capacity(cfg.depth);
            for l in 0..cfg.depth {
                let toks = (0..cfg.prompt_len)
                    .map(|i| check(format!("prompt.{l}.{i}"), &[d]))
                    .collect::<Result<Vec<_>>>()?;
                prompts.push(toks);
            }
            Adapter::Prompts(PlainPrompts { prompts })
        }
        other => return Err(Error::Format(format!("unknown adapter kind `{other}`"))),
    };
    if !tensors.is_empty() {
        let mut extra: Vec<_> = tensors.keys().cloned().collect();
        extra.sort();
        return Err(Error::Format(format!("checkpoint has unexpected tensors {extra:?}")));
    }
    Ok(VitModel { cfg, backbone, adapter })
}

pub fn save<F: Real>(model: &VitModel<F>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load<F: Real>(path: impl AsRef<Path>) -> Result<VitModel<F>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Load a checkpoint and require it to match `expected` geometry.
pub fn load_matching<F: Real>(path: impl AsRef<Path>, expected: &VitConfig) -> Result<VitModel<F>> {
    let model = load::<F>(path)?;
    if model.cfg.geometry() != expected.geometry() {
        return Err(Error::Config(format!(
            "checkpoint geometry [{}] does not match configured geometry [{}]",
            model.cfg.geometry(),
            expected.geometry()
        )));
    }
    Ok(model)
}
