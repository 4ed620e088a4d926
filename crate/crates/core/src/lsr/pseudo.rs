use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::LsrConfig;
use crate::error::{Error, Result};
use crate::tensor::io::save_tensor;
use crate::tensor::{Real, RngStream, Tensor};

/// Pseudo-classes for one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoClassBatch<F: Real> {
    /// `[n0, d]`.
    pub prototypes: Tensor<F>,
    /// `[n0 * members_per_pseudo, d]`, grouped by pseudo-class.
    pub members: Tensor<F>,
    pub members_per_pseudo: usize,
    pub seed: u64,
    pub episode: u64,
}

impl<F: Real> PseudoClassBatch<F> {
    pub fn len(&self) -> usize {
        self.prototypes.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mean of each pseudo-class's members, `[n0, d]`.
    pub fn member_means(&self) -> Tensor<F> {
        let d = self.members.shape()[1];
        let m = self.members_per_pseudo;
        let inv = F::from_f64(1.0 / m as f64);
        let mut data = vec![F::zero(); self.len() * d];
        for (i, row) in self.members.data().chunks(d).enumerate() {
            for (acc, &v) in data[(i / m) * d..(i / m + 1) * d].iter_mut().zip(row) {
                *acc += v * inv;
            }
        }
        Tensor::from_raw(vec![self.len(), d], data)
    }
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

/// Rejection-sample `cfg.n0` pseudo-prototypes: a gaussian direction scaled
/// to the mean base-prototype norm, accepted when its cosine distance to
/// every base prototype is at least `cfg.min_sep`. Members are the
/// prototype plus `epsilon`-scaled gaussian noise.
pub fn generate_pseudo_classes<F: Real>(
    base_prototypes: &Tensor<F>,
    cfg: &LsrConfig,
    rng: &mut RngStream,
    episode: u64,
) -> Result<PseudoClassBatch<F>> {
    let (n, d) = base_prototypes.dims2()?;
    if !base_prototypes.is_finite() {
        return Err(Error::Numeric("base prototypes are not finite".into()));
    }
    let base: Vec<Vec<f64>> = (0..n)
        .map(|i| base_prototypes.row(i).iter().map(|v| v.as_f64()).collect())
        .collect();
    let norms: Vec<f64> = base
        .iter()
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&x| !(x > 0.0)) {
        return Err(Error::Numeric(format!("base prototype {i} has zero norm")));
    }
    let radius = norms.iter().sum::<f64>() / n as f64;
    let mut protos = Vec::with_capacity(cfg.n0 * d);
    for p in 0..cfg.n0 {
        let mut accepted = None;
        for _ in 0..cfg.max_attempts {
            let u: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
            let len = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(len > 0.0) {
                continue;
            }
            let cand: Vec<f64> = u.iter().map(|x| x * radius / len).collect();
            if base.iter().all(|b| cosine_distance(&cand, b) >= cfg.min_sep) {
                accepted = Some(cand);
                break;
            }
        }
        let cand = accepted.ok_or_else(|| {
            Error::Numeric(format!(
                "pseudo-class {p}: no direction at cosine distance >= {} from all {n} base prototypes \
                 within {} attempts; lower min_sep",
                cfg.min_sep, cfg.max_attempts
            ))
        })?;
        protos.extend(cand);
    }
    let m = cfg.members_per_pseudo;
    let mut members = Vec::with_capacity(cfg.n0 * m * d);
    for p in 0..cfg.n0 {
        for _ in 0..m {
            members.extend((0..d).map(|k| F::from_f64(protos[p * d + k] + cfg.epsilon * rng.gaussian())));
        }
    }
    Ok(PseudoClassBatch {
        prototypes: Tensor::from_raw(vec![cfg.n0, d], protos.into_iter().map(F::from_f64).collect()),
        members: Tensor::from_raw(vec![cfg.n0 * m, d], members),
        members_per_pseudo: m,
        seed: rng.seed(),
        episode,
    })
}

/// Append pseudo members to support embeddings as classes `N..N + n0`,
/// where `N` is one past the largest support label.
pub fn merge_pseudo<F: Real>(
    support: &Tensor<F>,
    labels: &[usize],
    pseudo: Option<&PseudoClassBatch<F>>,
) -> Result<(Tensor<F>, Vec<usize>)> {
    let (n, d) = support.dims2()?;
    if labels.len() != n {
        return Err(Error::Contract(format!("{n} support rows but {} labels", labels.len())));
    }
    let Some(pseudo) = pseudo else {
        return Ok((support.clone(), labels.to_vec()));
    };
    if pseudo.members.shape()[1] != d {
        return Err(Error::shape("merge_pseudo", support.shape(), pseudo.members.shape()));
    }
    let ways = labels.iter().max().map_or(0, |&m| m + 1);
    let merged = Tensor::concat(&[support, &pseudo.members], 0)?;
    let mut out = labels.to_vec();
    out.extend((0..pseudo.members.shape()[0]).map(|i| ways + i / pseudo.members_per_pseudo));
    Ok((merged, out))
}

#[derive(Serialize)]
struct Sidecar<'a> {
    seed: u64,
    episode: u64,
    n0: usize,
    members_per_pseudo: usize,
    dim: usize,
    precision: &'a str,
    prototypes_file: String,
    members_file: String,
    config: &'a LsrConfig,
}

/// Write `<prefix>.prototypes.cptn`, `<prefix>.members.cptn` and a
/// `<prefix>.json` metadata record. Returns the sidecar path.
pub fn save_pseudo_batch<F: Real>(
    batch: &PseudoClassBatch<F>,
    cfg: &LsrConfig,
    prefix: impl AsRef<Path>,
) -> Result<PathBuf> {
    let prefix = prefix.as_ref();
    let with = |suffix: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    let (protos, members, sidecar) = (with(".prototypes.cptn"), with(".members.cptn"), with(".json"));
    save_tensor(&protos, &batch.prototypes)?;
    save_tensor(&members, &batch.members)?;
    let file_name = |p: &Path| {
        p.file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    let meta = Sidecar {
        seed: batch.seed,
        episode: batch.episode,
        n0: batch.len(),
        members_per_pseudo: batch.members_per_pseudo,
        dim: batch.prototypes.shape()[1],
        precision: F::PRECISION.as_str(),
        prototypes_file: file_name(&protos),
        members_file: file_name(&members),
        config: cfg,
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;
    Ok(sidecar)
}
