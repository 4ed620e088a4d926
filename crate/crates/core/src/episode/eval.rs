use super::proto::{compute_prototypes, proto_logits, top1_correct, ProtoHead};
use super::{sample_from_sizes, AccuracyReport, EpisodeConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lsr::rotate90;
use crate::model::VitModel;
use crate::tensor::{Real, RngStream, StreamPurpose, Tensor};

/// CLS embeddings of every sample, one `[n_c, d]` tensor per class.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedDataset<F: Real> {
    pub classes: Vec<Tensor<F>>,
}

impl<F: Real> EmbeddedDataset<F> {
    pub fn class_sizes(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.shape()[0]).collect()
    }

    pub fn row(&self, class: usize, sample: usize) -> &[F] {
        self.classes[class].row(sample)
    }

    /// All embeddings stacked class-major with their class indices.
    pub fn stacked(&self) -> Result<(Tensor<F>, Vec<usize>)> {
        let parts: Vec<&Tensor<F>> = self.classes.iter().collect();
        let labels = self
            .classes
            .iter()
            .enumerate()
            .flat_map(|(c, t)| std::iter::repeat_n(c, t.shape()[0]))
            .collect();
        Ok((Tensor::concat(&parts, 0)?, labels))
    }
}

/// Embed every image of `dataset` (optionally rotated by `rotation` quarter
/// turns) in batches of `batch` images.
pub fn embed_dataset<F: Real>(
    model: &VitModel<F>,
    dataset: &Dataset,
    batch: usize,
    rotation: u8,
) -> Result<EmbeddedDataset<F>> {
    let batch = batch.max(1);
    let mut classes = Vec::with_capacity(dataset.num_classes());
    for (ci, class) in dataset.classes.iter().enumerate() {
        let mut rows: Vec<Tensor<F>> = Vec::new();
        for start in (0..class.images.len()).step_by(batch) {
            let end = (start + batch).min(class.images.len());
            let inputs = (start..end)
                .map(|s| {
                    let x = dataset.model_input::<F>(ci, s);
                    if rotation.is_multiple_of(4) {
                        Ok(x)
                    } else {
                        rotate90(&x, rotation as i64)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Tensor<F>> = inputs.iter().collect();
            rows.push(model.embed(&refs)?);
        }
        let refs: Vec<&Tensor<F>> = rows.iter().collect();
        classes.push(Tensor::concat(&refs, 0)?);
    }
    Ok(EmbeddedDataset { classes })
}

fn gather<F: Real>(emb: &EmbeddedDataset<F>, items: &[super::EpisodeItem]) -> Tensor<F> {
    let d = emb.classes[0].shape()[1];
    let mut data = Vec::with_capacity(items.len() * d);
    for it in items {
        data.extend_from_slice(emb.row(it.class, it.sample));
    }
    Tensor::from_raw(vec![items.len(), d], data)
}

/// Top-1 accuracy of one episode given precomputed embeddings.
fn episode_accuracy<F: Real>(emb: &EmbeddedDataset<F>, episode: &super::Episode, head: &ProtoHead) -> Result<f64> {
    let support = gather(emb, &episode.support);
    let query = gather(emb, &episode.query);
    let protos = compute_prototypes(&support, &episode.support_labels())?;
    let logits = proto_logits(&query, &protos, head.metric, head.temperature)?;
    if !logits.is_finite() {
        return Err(Error::Numeric("non-finite logits during evaluation".into()));
    }
    let correct = top1_correct(&logits, &episode.query_labels());
    Ok(correct as f64 / episode.query.len() as f64)
}

/// `n_episodes` episodes over cached embeddings. Episode `e` draws from the
/// stream `(seed, Eval, e)`.
pub fn evaluate_embeddings<F: Real>(
    emb: &EmbeddedDataset<F>,
    cfg: &EpisodeConfig,
    n_episodes: usize,
    seed: u64,
    head: &ProtoHead,
) -> Result<AccuracyReport> {
    if n_episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    head.validate()?;
    let sizes = emb.class_sizes();
    let root = RngStream::new(seed);
    let accuracies = (0..n_episodes)
        .map(|e| {
            let mut rng = root.derive(StreamPurpose::Eval, e as u64);
            let episode = sample_from_sizes(&sizes, cfg, &mut rng)?;
            episode_accuracy(emb, &episode, head)
        })
        .collect::<Result<Vec<_>>>()?;
    AccuracyReport::from_accuracies(accuracies)
}

/// Embed `dataset` once, then evaluate `n_episodes` episodes.
pub fn evaluate<F: Real>(
    model: &VitModel<F>,
    dataset: &Dataset,
    cfg: &EpisodeConfig,
    n_episodes: usize,
    seed: u64,
    head: &ProtoHead,
) -> Result<AccuracyReport> {
    cfg.check_dataset(dataset)?;
    let emb = embed_dataset(model, dataset, 64, 0)?;
    evaluate_embeddings(&emb, cfg, n_episodes, seed, head)
}
