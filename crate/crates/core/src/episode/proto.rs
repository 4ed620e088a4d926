use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Distance used by the prototypical head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// `logit = -||q - c||^2 / tau`.
    #[default]
    SqEuclidean,
    /// `logit = cos(q, c) / tau`.
    Cosine,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::SqEuclidean => "sq-euclidean",
            Metric::Cosine => "cosine",
        }
    }
}

/// Prototypical classifier settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtoHead {
    pub metric: Metric,
    pub temperature: f64,
}

impl Default for ProtoHead {
    fn default() -> Self {
        ProtoHead {
            metric: Metric::SqEuclidean,
            temperature: 1.0,
        }
    }
}

impl ProtoHead {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Averaging matrix `[ways, n]` for balanced labels.
fn averaging_matrix<F: Real>(labels: &[usize]) -> Result<Tensor<F>> {
    if labels.is_empty() {
        return Err(Error::Contract("no support embeddings".into()));
    }
    let ways = labels.iter().max().map_or(0, |&m| m + 1);
    let mut counts = vec![0usize; ways];
    for &l in labels {
        counts[l] += 1;
    }
    let shots = counts[0];
    if let Some((label, &c)) = counts.iter().enumerate().find(|(_, &c)| c != shots) {
        return Err(Error::Contract(format!(
            "label imbalance: label 0 has {shots} support samples but label {label} has {c}"
        )));
    }
    let inv = F::from_f64(1.0 / shots as f64);
    let n = labels.len();
    let mut data = vec![F::zero(); ways * n];
    for (j, &l) in labels.iter().enumerate() {
        data[l * n + j] = inv;
    }
    Ok(Tensor::from_raw(vec![ways, n], data))
}

/// Class means of `[n, d]` support embeddings; labels must be `0..N`, each
/// appearing equally often.
pub fn prototypes_var<F: Real>(g: &mut Graph<F>, support: Var, labels: &[usize]) -> Result<Var> {
    let n = g.shape(support)[0];
    if labels.len() != n {
        return Err(Error::Contract(format!(
            "{n} support embeddings but {} labels",
            labels.len()
        )));
    }
    let avg = g.constant(averaging_matrix(labels)?);
    g.matmul(avg, support)
}

/// `[m, d]` queries against `[N, d]` prototypes to `[m, N]` logits.
pub fn proto_logits_var<F: Real>(
    g: &mut Graph<F>,
    query: Var,
    prototypes: Var,
    metric: Metric,
    temperature: f64,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let inv_tau = F::from_f64(1.0 / temperature);
    match metric {
        Metric::SqEuclidean => {
            let d = g.sq_dist(query, prototypes)?;
            Ok(g.scale(d, -inv_tau))
        }
        Metric::Cosine => {
            let q = g
                .l2_normalize_last(query)
                .map_err(|e| Error::Numeric(format!("cosine logits, query side: {e}")))?;
            let c = g
                .l2_normalize_last(prototypes)
                .map_err(|e| Error::Numeric(format!("cosine logits, prototype side: {e}")))?;
            let ct = g.transpose(c)?;
            let sim = g.matmul(q, ct)?;
            Ok(g.scale(sim, inv_tau))
        }
    }
}

pub fn compute_prototypes<F: Real>(embeddings: &Tensor<F>, labels: &[usize]) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let e = g.constant(embeddings.clone());
    let p = prototypes_var(&mut g, e, labels)?;
    Ok(g.value(p).clone())
}

pub fn proto_logits<F: Real>(
    query: &Tensor<F>,
    prototypes: &Tensor<F>,
    metric: Metric,
    temperature: f64,
) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let q = g.constant(query.clone());
    let c = g.constant(prototypes.clone());
    let l = proto_logits_var(&mut g, q, c, metric, temperature)?;
    Ok(g.value(l).clone())
}

/// Rows of `[m, N]` logits whose first maximal entry is the label.
pub(crate) fn top1_correct<F: Real>(logits: &Tensor<F>, labels: &[usize]) -> usize {
    let n = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(n)
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0;
            for j in 1..n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count()
}

/// Mean cross-entropy of `logits` against episode-local labels.
pub fn episode_loss<F: Real>(logits: &Tensor<F>, labels: &[usize]) -> Result<F> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy(l, labels)?;
    g.value(loss).item()
}
