//! N-way K-shot episodes, prototypical classification, episodic training of
//! the adapter parameters and confidence-interval evaluation.

mod eval;
mod optim;
mod proto;
mod report;
mod train;

pub use eval::{embed_dataset, evaluate, evaluate_embeddings, EmbeddedDataset};
pub use optim::{AdamW, AdamWConfig};
pub use proto::{compute_prototypes, episode_loss, proto_logits, proto_logits_var, prototypes_var, Metric, ProtoHead};
pub use report::AccuracyReport;
pub(crate) use train::{episode_graph, episode_inputs};
pub use train::{train, EpisodeRecord, TrainConfig, TrainOutcome, ValidationRecord};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::RngStream;

/// Shape of an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            ways: 5,
            shots: 1,
            queries: 15,
        }
    }
}

impl EpisodeConfig {
    pub fn new(ways: usize, shots: usize, queries: usize) -> Self {
        EpisodeConfig { ways, shots, queries }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 || self.shots < 1 || self.queries < 1 {
            return Err(Error::Config(format!(
                "episodes need ways >= 2, shots >= 1, queries >= 1 (got {}/{}/{})",
                self.ways, self.shots, self.queries
            )));
        }
        Ok(())
    }

    /// Check that `dataset` can supply this episode shape.
    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        self.validate()?;
        let need = self.shots + self.queries;
        let eligible = dataset.classes.iter().filter(|c| c.images.len() >= need).count();
        if eligible < self.ways {
            return Err(Error::Data(format!(
                "{}-way episodes need {} classes with >= {need} samples; dataset `{}` has {eligible} (short by {})",
                self.ways,
                self.ways,
                dataset.name,
                self.ways - eligible
            )));
        }
        Ok(())
    }
}

/// One sample reference inside an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeItem {
    /// Class index into the dataset.
    pub class: usize,
    /// Sample index within the class.
    pub sample: usize,
    /// Counterclockwise quarter turns applied before embedding.
    pub rotation: u8,
    /// Episode-local label.
    pub label: usize,
}

/// What an episode-local label stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeClass {
    pub class: usize,
    pub rotation: u8,
}

/// Support items ordered by label with `shots` entries each, then query
/// items ordered by label with `queries` entries each.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub shots: usize,
    pub queries: usize,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
    /// `classes[label]`.
    pub classes: Vec<EpisodeClass>,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.classes.len()
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|i| i.label).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|i| i.label).collect()
    }

    /// Support followed by query items.
    pub fn items(&self) -> impl Iterator<Item = &EpisodeItem> {
        self.support.iter().chain(&self.query)
    }
}

/// Draw `ways` classes, then `shots + queries` distinct samples per class.
pub fn sample_episode(dataset: &Dataset, cfg: &EpisodeConfig, rng: &mut RngStream) -> Result<Episode> {
    cfg.check_dataset(dataset)?;
    sample_from_sizes(&dataset.class_sizes(), cfg, rng)
}

/// Episode sampling over classes of the given sizes.
pub fn sample_from_sizes(sizes: &[usize], cfg: &EpisodeConfig, rng: &mut RngStream) -> Result<Episode> {
    cfg.validate()?;
    let need = cfg.shots + cfg.queries;
    let eligible: Vec<usize> = (0..sizes.len()).filter(|&c| sizes[c] >= need).collect();
    if eligible.len() < cfg.ways {
        return Err(Error::Data(format!(
            "{}-way episodes need {} classes with >= {need} samples, found {} (short by {})",
            cfg.ways,
            cfg.ways,
            eligible.len(),
            cfg.ways - eligible.len()
        )));
    }
    let picked = rng.choose_distinct(eligible.len(), cfg.ways)?;
    let mut support = Vec::with_capacity(cfg.ways * cfg.shots);
    let mut query = Vec::with_capacity(cfg.ways * cfg.queries);
    let mut classes = Vec::with_capacity(cfg.ways);
    for (label, &p) in picked.iter().enumerate() {
        let class = eligible[p];
        let samples = rng.choose_distinct(sizes[class], need)?;
        let item = |sample| EpisodeItem {
            class,
            sample,
            rotation: 0,
            label,
        };
        support.extend(samples[..cfg.shots].iter().map(|&s| item(s)));
        query.extend(samples[cfg.shots..].iter().map(|&s| item(s)));
        classes.push(EpisodeClass { class, rotation: 0 });
    }
    Ok(Episode {
        shots: cfg.shots,
        queries: cfg.queries,
        support,
        query,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthConfig};

    fn data(classes: usize, per: usize) -> Dataset {
        synth_dataset(&SynthConfig {
            classes,
            samples_per_class: per,
            height: 8,
            width: 8,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn sizes_disjointness_and_determinism() {
        let ds = data(8, 20);
        let cfg = EpisodeConfig::new(5, 1, 15);
        let a = sample_episode(&ds, &cfg, &mut RngStream::new(4)).unwrap();
        assert_eq!((a.support.len(), a.query.len(), a.ways()), (5, 75, 5));
        let b = sample_episode(&ds, &cfg, &mut RngStream::new(4)).unwrap();
        assert_eq!(a, b);
        for label in 0..5 {
            let s: Vec<_> = a.support.iter().filter(|i| i.label == label).collect();
            let q: Vec<_> = a.query.iter().filter(|i| i.label == label).collect();
            assert_eq!((s.len(), q.len()), (1, 15));
            assert!(s
                .iter()
                .all(|x| q.iter().all(|y| x.sample != y.sample && x.class == y.class)));
        }
    }

    #[test]
    fn too_few_classes_is_a_data_error() {
        let ds = data(4, 20);
        let err = sample_episode(&ds, &EpisodeConfig::new(5, 5, 1), &mut RngStream::new(0)).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("short by 1"));
    }
}
