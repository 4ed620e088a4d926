use serde::{Deserialize, Serialize};

use super::eval::{embed_dataset, evaluate_embeddings};
use super::optim::{AdamW, AdamWConfig};
use super::proto::{proto_logits_var, prototypes_var, top1_correct, ProtoHead};
use super::{sample_episode, AccuracyReport, Episode, EpisodeConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lsr::{expand_episode_sst, generate_pseudo_classes, rotate90, LsrConfig};
use crate::model::{Forward, VitModel};
use crate::tensor::{Graph, Real, RngStream, StreamPurpose, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    pub val_episodes: usize,
    /// Validate every this many training episodes (and once before training).
    pub val_every: usize,
    /// Shape of training episodes.
    pub episode: EpisodeConfig,
    /// Query shots of validation episodes; ways and shots follow `episode`.
    pub val_queries: usize,
    pub optimizer: AdamWConfig,
    pub head: ProtoHead,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 1000,
            val_episodes: 600,
            val_every: 50,
            episode: EpisodeConfig::default(),
            val_queries: 15,
            optimizer: AdamWConfig::default(),
            head: ProtoHead::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Preset for the synthetic desk-scale runs: step size 1e-2 and 5 query
    /// samples per class in training episodes.
    pub fn desk() -> Self {
        TrainConfig {
            episode: EpisodeConfig::new(5, 1, 5),
            optimizer: AdamWConfig {
                lr: 1e-2,
                ..AdamWConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.val_episodes == 0 || self.val_every == 0 {
            return Err(Error::Config(
                "episode counts and validation cadence must be positive".into(),
            ));
        }
        if !self.episodes.is_multiple_of(self.val_every) {
            return Err(Error::Config(format!(
                "validation cadence {} does not divide {} training episodes",
                self.val_every, self.episodes
            )));
        }
        self.episode.validate()?;
        self.optimizer.validate()?;
        self.head.validate()?;
        if self.val_queries == 0 {
            return Err(Error::Config("val_queries must be positive".into()));
        }
        Ok(())
    }

    pub fn val_episode(&self) -> EpisodeConfig {
        EpisodeConfig {
            queries: self.val_queries,
            ..self.episode
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub loss: f64,
    /// Top-1 accuracy on the episode's (possibly rotated) queries.
    pub accuracy: f64,
    /// Classes in the softmax, pseudo-classes included.
    pub ways: usize,
    pub pseudo_classes: usize,
    pub grad_norm: f64,
    pub param_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    /// Training episodes completed before this validation.
    pub after_episode: usize,
    pub mean: f64,
    pub half_width: f64,
    pub best_so_far: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<F: Real> {
    /// Model with the best validation accuracy.
    pub best: VitModel<F>,
    pub best_after_episode: usize,
    pub best_validation: AccuracyReport,
    pub final_model: VitModel<F>,
    pub log: Vec<EpisodeRecord>,
    pub validations: Vec<ValidationRecord>,
}

pub(crate) fn episode_inputs<F: Real>(dataset: &Dataset, episode: &Episode) -> Result<Vec<Tensor<F>>> {
    episode
        .items()
        .map(|it| {
            let x = dataset.model_input::<F>(it.class, it.sample);
            if it.rotation == 0 {
                Ok(x)
            } else {
                rotate90(&x, i64::from(it.rotation))
            }
        })
        .collect()
}

fn norm<F: Real>(ts: &[&Tensor<F>]) -> f64 {
    ts.iter().map(|t| t.l2_norm().powi(2)).sum::<f64>().sqrt()
}

/// Loss, accuracy and adapter gradients of one training episode.
pub(crate) struct StepResult<F: Real> {
    pub loss: F,
    pub accuracy: f64,
    pub ways: usize,
    pub pseudo_classes: usize,
    pub grads: Vec<Tensor<F>>,
}

/// Handles of one episode's loss graph.
pub(crate) struct EpisodeGraph {
    pub forward: Forward,
    pub logits: Var,
    pub loss: Var,
    pub pseudo_classes: usize,
}

/// Maps the real prototypes of an episode to extra pseudo-prototypes.
pub(crate) type PseudoHook<'a, F> = &'a mut dyn FnMut(&Tensor<F>) -> Result<Tensor<F>>;

/// Build the prototypical loss of `episode` on `g`. `pseudo` receives the
/// real prototypes and returns extra constant prototypes to append.
pub(crate) fn episode_graph<F: Real>(
    g: &mut Graph<F>,
    model: &VitModel<F>,
    inputs: &[&Tensor<F>],
    episode: &Episode,
    head: &ProtoHead,
    track_grad: bool,
    pseudo: Option<PseudoHook<'_, F>>,
) -> Result<EpisodeGraph> {
    let forward = model.forward_cls(g, inputs, track_grad)?;
    let (ns, nq) = (episode.support.len(), episode.query.len());
    let support = g.narrow(forward.cls, 0, 0, ns)?;
    let query = g.narrow(forward.cls, 0, ns, nq)?;
    let mut protos = prototypes_var(g, support, &episode.support_labels())?;
    let mut pseudo_classes = 0;
    if let Some(gen) = pseudo {
        let extra = gen(g.value(protos))?;
        pseudo_classes = extra.shape()[0];
        let extra = g.constant(extra);
        protos = g.concat(&[protos, extra], 0)?;
    }
    let logits = proto_logits_var(g, query, protos, head.metric, head.temperature)?;
    let loss = g.cross_entropy(logits, &episode.query_labels())?;
    Ok(EpisodeGraph {
        forward,
        logits,
        loss,
        pseudo_classes,
    })
}

pub(crate) fn episode_step<F: Real>(
    model: &VitModel<F>,
    dataset: &Dataset,
    episode: &Episode,
    head: &ProtoHead,
    pseudo: Option<PseudoHook<'_, F>>,
) -> Result<StepResult<F>> {
    let inputs = episode_inputs::<F>(dataset, episode)?;
    let refs: Vec<&Tensor<F>> = inputs.iter().collect();
    let mut g = Graph::new();
    let eg = episode_graph(&mut g, model, &refs, episode, head, true, pseudo)?;
    let labels = episode.query_labels();
    let ways = g.shape(eg.logits)[1];
    let correct = top1_correct(g.value(eg.logits), &labels);
    g.backward(eg.loss)?;
    let grads = eg
        .forward
        .params
        .iter()
        .map(|&p| g.take_grad(p).unwrap_or_else(|| Tensor::zeros(g.shape(p))))
        .collect();
    Ok(StepResult {
        loss: g.value(eg.loss).item()?,
        accuracy: correct as f64 / labels.len() as f64,
        ways,
        pseudo_classes: eg.pseudo_classes,
        grads,
    })
}

fn validate_model<F: Real>(model: &VitModel<F>, val: &Dataset, cfg: &TrainConfig) -> Result<AccuracyReport> {
    let emb = embed_dataset(model, val, 64, 0)?;
    evaluate_embeddings(&emb, &cfg.val_episode(), cfg.val_episodes, cfg.seed, &cfg.head)
}

/// Episodic training of the adapter parameters.
///
/// Episode `t` is sampled from stream `(seed, Episode, t)`; pseudo-classes
/// for it come from `(seed, Pseudo, t)`, so toggling augmentations never
/// changes which samples are drawn. The untrained model is the first
/// selection candidate and a later validation must be strictly better to
/// replace it.
pub fn train<F: Real>(
    model: VitModel<F>,
    base: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    lsr: &LsrConfig,
    mut on_episode: impl FnMut(&EpisodeRecord),
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    lsr.validate(cfg.episodes)?;
    cfg.episode.check_dataset(base)?;
    cfg.val_episode().check_dataset(val)?;
    if model.trainable_params().is_empty() {
        return Err(Error::Config("model has no trainable parameters".into()));
    }
    let turns = lsr.quarter_turns()?;
    if !turns.is_empty() && base.geometry.1 != base.geometry.2 {
        return Err(Error::Config("rotations need square images".into()));
    }
    let root = RngStream::new(cfg.seed);
    let mut model = model;
    let mut opt = AdamW::new(cfg.optimizer);

    let first = validate_model(&model, val, cfg)?;
    let mut validations = vec![ValidationRecord {
        after_episode: 0,
        mean: first.mean,
        half_width: first.half_width,
        best_so_far: true,
    }];
    let mut best = (model.clone(), 0, first);
    let mut log = Vec::with_capacity(cfg.episodes);

    for t in 0..cfg.episodes {
        let mut ep_rng = root.derive(StreamPurpose::Episode, t as u64);
        let episode = sample_episode(base, &cfg.episode, &mut ep_rng)?;
        let episode = expand_episode_sst(&episode, &turns)?;
        let mut pseudo_rng = root.derive(StreamPurpose::Pseudo, t as u64);
        let mut gen = |protos: &Tensor<F>| -> Result<Tensor<F>> {
            Ok(generate_pseudo_classes(protos, lsr, &mut pseudo_rng, t as u64)?.member_means())
        };
        let pseudo: Option<PseudoHook<'_, F>> = if lsr.pseudo_active(t, cfg.episodes) {
            Some(&mut gen)
        } else {
            None
        };
        let step = episode_step(&model, base, &episode, &cfg.head, pseudo)?;
        let loss = step.loss.as_f64();
        let param_norm = norm(&model.trainable_params());
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at training episode {t}; adapter parameter norm {param_norm:.6e}"
            )));
        }
        let grad_refs: Vec<&Tensor<F>> = step.grads.iter().collect();
        let grad_norm = norm(&grad_refs);
        opt.step(&mut model.trainable_params_mut(), &step.grads)?;
        let record = EpisodeRecord {
            episode: t,
            loss,
            accuracy: step.accuracy,
            ways: step.ways,
            pseudo_classes: step.pseudo_classes,
            grad_norm,
            param_norm: norm(&model.trainable_params()),
        };
        on_episode(&record);
        log.push(record);

        if (t + 1) % cfg.val_every == 0 {
            let report = validate_model(&model, val, cfg)?;
            let better = report.mean > best.2.mean;
            validations.push(ValidationRecord {
                after_episode: t + 1,
                mean: report.mean,
                half_width: report.half_width,
                best_so_far: better,
            });
            if better {
                best = (model.clone(), t + 1, report);
            }
        }
    }
    Ok(TrainOutcome {
        best: best.0,
        best_after_episode: best.1,
        best_validation: best.2,
        final_model: model,
        log,
        validations,
    })
}
