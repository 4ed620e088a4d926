use cplsr_core::data::Dataset;
use cplsr_core::episode::{proto_logits_var, prototypes_var, sample_episode, AdamW, TrainConfig};
use cplsr_core::model::VitModel;
use cplsr_core::tensor::{Graph, Real, RngStream, StreamPurpose, Tensor};

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

/// Episodic training written out directly from the public building blocks,
/// with no augmentation code involved. Returns the per-episode losses.
pub fn plain_losses<F: Real>(mut model: VitModel<F>, base: &Dataset, cfg: &TrainConfig) -> Vec<f64> {
    let root = RngStream::new(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer);
    let mut losses = Vec::new();
    for t in 0..cfg.episodes {
        let episode = sample_episode(base, &cfg.episode, &mut root.derive(StreamPurpose::Episode, t as u64)).unwrap();
        let inputs: Vec<Tensor<F>> = episode
            .items()
            .map(|it| base.model_input(it.class, it.sample))
            .collect();
        let refs: Vec<&Tensor<F>> = inputs.iter().collect();
        let mut g = Graph::new();
        let fwd = model.forward_cls(&mut g, &refs, true).unwrap();
        let ns = episode.support.len();
        let support = g.narrow(fwd.cls, 0, 0, ns).unwrap();
        let query = g.narrow(fwd.cls, 0, ns, episode.query.len()).unwrap();
        let protos = prototypes_var(&mut g, support, &episode.support_labels()).unwrap();
        let logits = proto_logits_var(&mut g, query, protos, cfg.head.metric, cfg.head.temperature).unwrap();
        let loss = g.cross_entropy(logits, &episode.query_labels()).unwrap();
        g.backward(loss).unwrap();
        let grads: Vec<Tensor<F>> = fwd.params.iter().map(|&p| g.take_grad(p).unwrap()).collect();
        losses.push(g.value(loss).to_f64_vec()[0]);
        opt.step(&mut model.trainable_params_mut(), &grads).unwrap();
    }
    losses
}

pub fn bits(values: &[f64]) -> Vec<u64> {
    values.iter().map(|v| v.to_bits()).collect()
}
