use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::episode::{episode_graph, episode_inputs, Episode, ProtoHead};
use crate::error::{Error, Result};
use crate::model::{Adapter, VitModel};
use crate::tensor::{GradFault, Graph, RngStream, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckOptions {
    /// Largest accepted `|a - n| / max(|a|, |n|)`.
    pub tolerance: f64,
    /// Central-difference step.
    pub step: f64,
    /// Entries with `max(|a|, |n|)` below this are classified as zero gradients.
    pub zero_threshold: f64,
    /// Check a random subset of this many entries when the adapter has more.
    pub max_entries: Option<usize>,
    /// Seed of the subsample.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            tolerance: 1e-5,
            step: 1e-5,
            zero_threshold: 1e-10,
            max_entries: None,
            seed: 0,
        }
    }
}

/// One checked parameter entry. For CP matrices `slot` is the head and
/// `(row, col)` the matrix position; for prompts `slot` is the token and
/// `col` the coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradEntry {
    pub layer: usize,
    pub slot: usize,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub record: String,
    pub total_entries: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub failures: Vec<GradEntry>,
    /// Entries whose analytic and numeric gradients are both negligible.
    pub zero_gradient: Vec<GradEntry>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn to_json_line(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }
}

fn episode_loss_value(
    model: &VitModel<f64>,
    inputs: &[&Tensor<f64>],
    episode: &Episode,
    head: &ProtoHead,
) -> Result<f64> {
    let mut g = Graph::new();
    let eg = episode_graph(&mut g, model, inputs, episode, head, false, None)?;
    g.value(eg.loss).item()
}

/// Compare backward gradients of the episode loss with respect to the
/// adapter parameters against central finite differences.
pub fn grad_check_model(
    model: &VitModel<f64>,
    dataset: &Dataset,
    episode: &Episode,
    head: &ProtoHead,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    grad_check_with(model, dataset, episode, head, opts, None)
}

/// [`grad_check_model`] with a deliberately faulty backward rule.
#[doc(hidden)]
pub fn grad_check_with_fault(
    model: &VitModel<f64>,
    dataset: &Dataset,
    episode: &Episode,
    head: &ProtoHead,
    opts: &GradCheckOptions,
    fault: GradFault,
) -> Result<GradCheckReport> {
    grad_check_with(model, dataset, episode, head, opts, Some(fault))
}

fn grad_check_with(
    model: &VitModel<f64>,
    dataset: &Dataset,
    episode: &Episode,
    head: &ProtoHead,
    opts: &GradCheckOptions,
    fault: Option<GradFault>,
) -> Result<GradCheckReport> {
    if !(opts.tolerance > 0.0 && opts.step > 0.0 && opts.zero_threshold >= 0.0) {
        return Err(Error::Config(format!("invalid gradient-check options {opts:?}")));
    }
    let shape_of = |p: usize| -> (usize, usize, usize) {
        match &model.adapter {
            Adapter::Cp(cp) => {
                let heads = cp.matrices[0].len();
                let dh = cp.matrices[0][0].shape()[1];
                (p / heads, p % heads, dh)
            }
            Adapter::Prompts(pr) => {
                let len = pr.len();
                (p / len, p % len, pr.prompts[0][0].numel())
            }
            Adapter::Frozen => (0, 0, 1),
        }
    };
    let sizes: Vec<usize> = model.trainable_params().iter().map(|t| t.numel()).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::Config("model has no trainable parameters to check".into()));
    }

    let inputs = episode_inputs::<f64>(dataset, episode)?;
    let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
    let mut g = match fault {
        Some(f) => Graph::with_fault(f),
        None => Graph::new(),
    };
    let eg = episode_graph(&mut g, model, &refs, episode, head, true, None)?;
    g.backward(eg.loss)?;
    let analytic: Vec<Tensor<f64>> = eg
        .forward
        .params
        .iter()
        .map(|&p| g.take_grad(p).unwrap_or_else(|| Tensor::zeros(g.shape(p))))
        .collect();

    let flat: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .flat_map(|(p, &n)| (0..n).map(move |i| (p, i)))
        .collect();
    let selected: Vec<(usize, usize)> = match opts.max_entries {
        Some(k) if k < total => {
            let mut idx = RngStream::new(opts.seed).choose_distinct(total, k)?;
            idx.sort_unstable();
            idx.into_iter().map(|i| flat[i]).collect()
        }
        _ => flat,
    };

    let mut probe = model.clone();
    let h = opts.step;
    let mut failures = Vec::new();
    let mut zero_gradient = Vec::new();
    let mut max_rel_err = 0.0f64;
    for &(p, i) in &selected {
        let orig = probe.trainable_params()[p].data()[i];
        probe.trainable_params_mut()[p].data_mut()[i] = orig + h;
        let plus = episode_loss_value(&probe, &refs, episode, head)?;
        probe.trainable_params_mut()[p].data_mut()[i] = orig - h;
        let minus = episode_loss_value(&probe, &refs, episode, head)?;
        probe.trainable_params_mut()[p].data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss while perturbing parameter {p} entry {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[p].data()[i];
        let scale = a.abs().max(numeric.abs());
        let (layer, slot, width) = shape_of(p);
        let mut entry = GradEntry {
            layer,
            slot,
            row: i / width,
            col: i % width,
            analytic: a,
            numeric,
            rel_err: 0.0,
        };
        if scale < opts.zero_threshold {
            zero_gradient.push(entry);
            continue;
        }
        entry.rel_err = (a - numeric).abs() / scale;
        max_rel_err = max_rel_err.max(entry.rel_err);
        if entry.rel_err > opts.tolerance {
            failures.push(entry);
        }
    }
    Ok(GradCheckReport {
        record: "grad_check".into(),
        total_entries: total,
        checked: selected.len(),
        max_rel_err,
        tolerance: opts.tolerance,
        passed: failures.is_empty(),
        failures,
        zero_gradient,
    })
}
